"""Handcrafted rotation-invariant features (RRI, PPF, FPFH) and coordinate features."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geom import NeighborGraph, PointCloud, knn_graph

log = logging.getLogger(__name__)

LAYOUTS = ("RRI8", "PPF4", "FPFH33", "XYZ3", "DXYZ3K", "CONCAT")
FPFH_BINS = 11
_EPS = 1e-12
_TIE_TOL = 1e-9


@dataclass
class FeatureMatrix:
    values: np.ndarray
    layout: str
    # per-edge layouts store K blocks of `base` channels side by side
    edges: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"feature values must be N x C, got shape {self.values.shape}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}; expected one of {LAYOUTS}")
        base = {"PPF4": 4, "FPFH33": 33, "XYZ3": 3, "DXYZ3K": 3}.get(self.layout)
        if base is not None and self.values.shape[1] != base * self.edges:
            raise ValueError(
                f"layout {self.layout} with {self.edges} edge blocks needs "
                f"{base * self.edges} channels, got {self.values.shape[1]}")
        if self.layout == "RRI8" and self.values.shape[1] % 4:
            raise ValueError("RRI layout needs a multiple of 4 channels")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix has non-finite entries")

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def to_csv(self, path) -> None:
        n, c = self.values.shape
        header = "index," + ",".join(f"c{i}" for i in range(c))
        data = np.hstack([np.arange(n)[:, None], self.values])
        fmt = ["%d"] + ["%.10g"] * c
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmt)


class PPFQuadruple(NamedTuple):
    dist: float
    angle_n1_d: float
    angle_n2_d: float
    angle_n1_n2: float


def _angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle between row vectors; zero-length rows give 0."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    ok = denom > _EPS
    cos = np.einsum("...i,...i->...", a, b) / np.where(ok, denom, 1.0)
    return np.where(ok, np.arccos(np.clip(cos, -1.0, 1.0)), 0.0)


def _wrapped_neighbors(pts: np.ndarray, k: int) -> np.ndarray:
    """KNN indices; when k exceeds N-1 the neighbour list cycles."""
    n = len(pts)
    if n < 2:
        raise ValueError("need at least two points for neighbour features")
    kk = min(k, n - 1)
    nbr = knn_graph(pts, k=kk).neighbor_indices
    if kk < k:
        nbr = nbr[:, np.arange(k) % kk]
    return nbr


def rri_edges(points: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    """Per-edge RRI quadruples ``(r_i, r_ij, theta_ij, phi_ij)`` for a given neighbour matrix.

    The azimuth reference is the neighbour with the smallest polar angle (lowest
    index on ties). Output has shape (N, K, 4), aligned with ``neighbors``.
    """
    p = np.asarray(points, dtype=np.float64)
    nbr = np.asarray(neighbors, dtype=np.int64)
    pj = p[nbr]
    pi = np.broadcast_to(p[:, None, :], pj.shape)
    r_i = np.linalg.norm(p, axis=1)
    r_ij = np.linalg.norm(pj, axis=2)
    theta = _angle(pi, pj)

    at_origin = r_i <= _EPS
    if at_origin.any():
        log.debug("rri: %d points at the origin, theta/phi set to 0", int(at_origin.sum()))
        theta[at_origin] = 0.0
    u = np.where(at_origin[:, None], 0.0, p / np.where(at_origin, 1.0, r_i)[:, None])
    proj = pj - np.einsum("nkd,nd->nk", pj, u)[:, :, None] * u[:, None, :]

    order = np.lexsort((nbr, theta), axis=1)
    ref = proj[np.arange(len(p)), order[:, 0]]
    cross = np.cross(np.broadcast_to(ref[:, None, :], proj.shape), proj)
    sin = np.einsum("nkd,nd->nk", cross, u)
    cos = np.einsum("nkd,nd->nk", proj, ref)
    phi = np.arctan2(sin, cos)
    phi = np.where(phi <= -np.pi, np.pi, phi)
    degenerate = (np.linalg.norm(proj, axis=2) <= _EPS) | (np.linalg.norm(ref, axis=1) <= _EPS)[:, None]
    phi[degenerate | at_origin[:, None]] = 0.0
    return np.stack([np.broadcast_to(r_i[:, None], r_ij.shape), r_ij, theta, phi], axis=2)


def rri_features(cloud: PointCloud, k: int = 2, neighbors: np.ndarray | None = None) -> FeatureMatrix:
    """RRI relative to the coordinate origin; neighbours ordered by polar angle then index.

    ``neighbors`` overrides the KNN search (e.g. to keep a fixed graph under noise).
    """
    p = cloud.points
    if neighbors is not None:
        nbr = np.asarray(neighbors, dtype=np.int64)
        k = nbr.shape[1]
    else:
        nbr = None
    if k < 2:
        raise ValueError(f"RRI features require at least two neighbours, got k={k}")
    if nbr is None:
        nbr = _wrapped_neighbors(p, k)
    edges = rri_edges(p, nbr)
    theta = edges[:, :, 2]
    order = np.lexsort((nbr, theta), axis=1)
    edges = np.take_along_axis(edges, order[:, :, None], axis=1)
    return FeatureMatrix(edges.reshape(len(p), 4 * k), "RRI8", edges=k)


def ppf_pairs(p1, n1, p2, n2) -> np.ndarray:
    """Vectorised PPF quadruples, shape (..., 4)."""
    p1, n1, p2, n2 = (np.asarray(a, dtype=np.float64) for a in (p1, n1, p2, n2))
    d = p2 - p1
    dist = np.linalg.norm(d, axis=-1)
    a1 = _angle(d, n1)
    a2 = _angle(d, n2)
    a12 = _angle(n1, n2)
    return np.stack(np.broadcast_arrays(dist, a1, a2, a12), axis=-1)


def ppf_pair(p1, n1, p2, n2) -> PPFQuadruple:
    return PPFQuadruple(*(float(v) for v in ppf_pairs(p1, n1, p2, n2)))


def ppf_edges(cloud: PointCloud, neighbors: np.ndarray) -> np.ndarray:
    if cloud.normals is None:
        raise ValueError("PPF features need normals")
    p, n = cloud.points, cloud.normals
    nbr = np.asarray(neighbors, dtype=np.int64)
    return ppf_pairs(p[:, None, :], n[:, None, :], p[nbr], n[nbr])


def ppf_features(cloud: PointCloud, graph: NeighborGraph) -> FeatureMatrix:
    if cloud.normals is None:
        raise ValueError("PPF features need normals")
    sub = PointCloud(cloud.points[graph.center_indices], cloud.normals[graph.center_indices])
    p, n = sub.points, sub.normals
    nbr = graph.neighbor_indices
    q = ppf_pairs(p[:, None, :], n[:, None, :], cloud.points[nbr], cloud.normals[nbr])
    return FeatureMatrix(q.reshape(len(p), 4 * graph.k), "PPF4", edges=graph.k)


def darboux_pair(p1, n1, p2, n2):
    """Darboux-frame pair angles (theta, alpha, phi) in the usual FPFH convention.

    The source of the frame is whichever point's normal is more aligned with the
    connecting line; near-ties (within 1e-9 rad) keep p1. theta is circular, so
    values within 1e-9 of -pi are reported as pi. Inputs broadcast; returns three arrays.
    """
    d = p2 - p1
    dist = np.linalg.norm(d, axis=-1)
    safe = np.where(dist > _EPS, dist, 1.0)
    c1 = np.einsum("...i,...i->...", n1, d) / safe
    c2 = np.einsum("...i,...i->...", n2, d) / safe
    # equal angles (e.g. identical normals) keep p1 as source; otherwise rounding picks the frame
    swap = np.arccos(np.clip(np.abs(c1), 0, 1)) > np.arccos(np.clip(np.abs(c2), 0, 1)) + _TIE_TOL
    s = swap[..., None]
    ns = np.where(s, n2, n1)
    nt = np.where(s, n1, n2)
    dd = np.where(s, -d, d)
    phi = np.where(swap, -c2, c1)
    v = np.cross(dd, ns)
    vn = np.linalg.norm(v, axis=-1)
    ok = (vn > _EPS) & (dist > _EPS)
    v = v / np.where(ok, vn, 1.0)[..., None]
    w = np.cross(ns, v)
    alpha = np.einsum("...i,...i->...", v, nt)
    theta = np.arctan2(np.einsum("...i,...i->...", w, nt), np.einsum("...i,...i->...", ns, nt))
    # antiparallel normals give +-pi by rounding; keep them in one histogram bin
    theta = np.where(theta < -np.pi + _TIE_TOL, np.pi, theta)
    zero = ~ok
    return (np.where(zero, 0.0, theta), np.where(zero, 0.0, alpha), np.where(zero, 0.0, phi))


def _bin(values, lo, hi):
    b = np.floor(FPFH_BINS * (values - lo) / (hi - lo)).astype(np.int64)
    return np.clip(b, 0, FPFH_BINS - 1)


def _normalise_blocks(h: np.ndarray) -> np.ndarray:
    blocks = h.reshape(len(h), 3, FPFH_BINS)
    s = blocks.sum(axis=2, keepdims=True)
    blocks = np.where(s > 0, 100.0 * blocks / np.where(s > 0, s, 1.0), 0.0)
    return blocks.reshape(len(h), 3 * FPFH_BINS)


def spfh(cloud: PointCloud, neighbors: np.ndarray) -> np.ndarray:
    p, n = cloud.points, cloud.normals
    nbr = np.asarray(neighbors, dtype=np.int64)
    theta, alpha, phi = darboux_pair(p[:, None, :], n[:, None, :], p[nbr], n[nbr])
    npts, k = nbr.shape
    h = np.zeros((npts, 3 * FPFH_BINS))
    rows = np.repeat(np.arange(npts), k)
    incr = 100.0 / k
    for block, (vals, lo, hi) in enumerate(((theta, -np.pi, np.pi), (alpha, -1.0, 1.0), (phi, -1.0, 1.0))):
        np.add.at(h, (rows, block * FPFH_BINS + _bin(vals.ravel(), lo, hi)), incr)
    return h


def fpfh_features(cloud: PointCloud, k: int = 16, neighbors: np.ndarray | None = None) -> FeatureMatrix:
    """FPFH: SPFH(i) + (1/k) sum_j SPFH(j) / |p_i - p_j|, each 11-bin block scaled to sum 100."""
    if neighbors is not None:
        k = np.asarray(neighbors).shape[1]
    if cloud.normals is None:
        raise ValueError("FPFH features need normals")
    if k < 5:
        raise ValueError(f"FPFH needs k >= 5, got {k}")
    if not np.all(np.isfinite(cloud.normals)) or np.any(np.linalg.norm(cloud.normals, axis=1) < 0.5):
        raise ValueError("FPFH: degenerate normals")
    nbr = _wrapped_neighbors(cloud.points, k) if neighbors is None else np.asarray(neighbors, dtype=np.int64)
    s = spfh(cloud, nbr)
    dist = np.linalg.norm(cloud.points[nbr] - cloud.points[:, None, :], axis=2)
    w = 1.0 / np.maximum(dist, _EPS)
    agg = s + np.einsum("nk,nkc->nc", w, s[nbr]) / k
    return FeatureMatrix(_normalise_blocks(agg), "FPFH33")


def xyz_dxyz_features(cloud: PointCloud, graph: NeighborGraph) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Absolute coordinates (N x 3) and per-edge offsets p_j - p_i (N x 3K)."""
    centers = graph.center_indices
    p = cloud.points[centers]
    rel = cloud.points[graph.neighbor_indices] - p[:, None, :]
    return (FeatureMatrix(p.copy(), "XYZ3"),
            FeatureMatrix(rel.reshape(len(p), 3 * graph.k), "DXYZ3K", edges=graph.k))
