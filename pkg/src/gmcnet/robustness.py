"""Rotation and noise robustness measurements for handcrafted point features."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import crop_indices, random_shapes, surface_sample
from .geom import NeighborGraph, PointCloud, axis_angle_matrix, estimate_normals, knn_graph
from .rifeat import fpfh_features, ppf_features, rri_edges, rri_features, xyz_dxyz_features

FEATURE_KINDS = ("rri", "ppf", "fpfh", "xyz", "dxyz")
SWEEP_MODES = ("rotation_only", "se3")


@dataclass
class RobustnessCurve:
    variable: str
    magnitudes: np.ndarray
    series: dict = field(default_factory=dict)

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        if np.any(np.diff(self.magnitudes) <= 0):
            raise ValueError("sweep magnitudes must be strictly increasing")
        for name, vals in self.series.items():
            self.series[name] = np.asarray(vals, dtype=np.float64)
            if len(self.series[name]) != len(self.magnitudes):
                raise ValueError(f"series {name!r} length differs from the sweep")

    def merged(self, other: "RobustnessCurve") -> "RobustnessCurve":
        if other.variable != self.variable or not np.array_equal(other.magnitudes, self.magnitudes):
            raise ValueError("curves have different sweeps")
        return RobustnessCurve(self.variable, self.magnitudes, {**self.series, **other.series})

    def to_csv(self, path) -> None:
        names = list(self.series)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["magnitude"] + names)
            for i, m in enumerate(self.magnitudes):
                w.writerow([repr(float(m))] + [repr(float(self.series[n][i])) for n in names])


def build_corpus(count: int = 200, n_points: int = 2048, seed: int = 0) -> list:
    """Complete, centroid-centred surface samples of random composite shapes with mesh normals."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [surface_sample(m, n_points, int(s)).centered() for m, s in zip(random_shapes(count, seed), seeds)]


def _check_kind(kind):
    if kind not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {kind!r}; valid kinds: {', '.join(FEATURE_KINDS)}")


def point_features(cloud: PointCloud, kind: str, neighbors: np.ndarray | None = None, k: int = 16) -> np.ndarray:
    """Per-point feature rows of one kind.

    RRI is taken relative to the coordinate origin: its two-neighbour sorted form by
    default, or per-edge quadruples when ``neighbors`` is given. The other
    neighbourhood features use ``neighbors`` or a fresh k-NN graph. PPF and FPFH
    need normals on ``cloud``.
    """
    _check_kind(kind)
    if kind == "xyz":
        return cloud.points.copy()
    if neighbors is None and kind != "rri":
        neighbors = knn_graph(cloud, k=k).neighbor_indices
    if kind == "rri":
        if neighbors is None:
            return rri_features(cloud, 2).values
        return rri_edges(cloud.points, neighbors).reshape(len(cloud), -1)
    graph = NeighborGraph(np.arange(len(cloud)), neighbors, neighbors.shape[1])
    if kind == "ppf":
        return ppf_features(cloud, graph).values
    if kind == "fpfh":
        return fpfh_features(cloud, neighbors=neighbors).values
    return xyz_dxyz_features(cloud, graph)[1].values


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity; two zero rows count as identical."""
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    dot = np.einsum("ij,ij->i", a, b)
    both_zero = (na == 0) & (nb == 0)
    denom = np.where(na * nb > 0, na * nb, 1.0)
    return np.where(both_zero, 1.0, dot / denom)


def _axis(rng):
    a = rng.normal(size=3)
    return a / np.linalg.norm(a)


def _observed_features(obs: PointCloud, kind: str, k: int) -> np.ndarray:
    """Features of a posed partial under each kind's own SE(3) convention."""
    centred = obs.centered()
    if kind in ("ppf", "fpfh"):
        centred = estimate_normals(centred.without_normals(), k)
    if kind == "xyz" or kind == "dxyz":
        centred = obs
    return point_features(centred, kind, k=k)


def similarity_sweep(corpus, kind: str, magnitudes_deg, mode: str = "rotation_only", seed: int = 0,
                     keep_fraction: float = 0.75, k: int = 16, fresh_axis: bool = False) -> np.ndarray:
    """Mean per-point cosine similarity between features before and after a pose change.

    Each cloud gets one random axis; every magnitude rotates it by that angle about the
    axis through the origin. In ``rotation_only`` mode normals are transported with the
    cloud. In ``se3`` mode the reference is the complete centred cloud while the
    observation is a fixed partial crop shifted by a per-cloud translation and then
    rotated; RRI is recomputed about the partial's centroid and normals are
    re-estimated on the partial. Features are compared by point index. With
    ``fresh_axis`` every magnitude of every cloud draws its own axis.
    """
    _check_kind(kind)
    if mode not in SWEEP_MODES:
        raise ValueError(f"unknown sweep mode {mode!r}; expected one of {SWEEP_MODES}")
    mags = np.asarray(magnitudes_deg, dtype=np.float64)
    out = np.zeros((len(corpus), len(mags)))
    for ci, cloud in enumerate(corpus):
        rng = np.random.default_rng([seed, ci])
        axis = _axis(rng)
        if mode == "rotation_only":
            ref = point_features(cloud, kind, k=k)
            for mi, m in enumerate(mags):
                if fresh_axis:
                    axis = _axis(rng)
                r = axis_angle_matrix(axis, np.radians(m))
                moved = PointCloud(cloud.points @ r.T, None if cloud.normals is None else cloud.normals @ r.T)
                out[ci, mi] = cosine_similarity(ref, point_features(moved, kind, k=k)).mean()
        else:
            idx = crop_indices(cloud.points, int(round(keep_fraction * len(cloud))), rng)
            shift = rng.uniform(-0.5, 0.5, size=3)
            ref = point_features(cloud, kind, k=k)[idx]
            part = cloud.subset(idx).without_normals()
            for mi, m in enumerate(mags):
                if fresh_axis:
                    axis = _axis(rng)
                r = axis_angle_matrix(axis, np.radians(m))
                obs = PointCloud((part.points + shift) @ r.T)
                out[ci, mi] = cosine_similarity(ref, _observed_features(obs, kind, k)).mean()
    return out.mean(axis=0)


def rotation_curve(corpus, kinds, magnitudes_deg, mode: str = "rotation_only", seed: int = 0) -> RobustnessCurve:
    suffix = "" if mode == "rotation_only" else "-se3"
    return RobustnessCurve("rotation_deg", magnitudes_deg,
                           {f"{kd}{suffix}": similarity_sweep(corpus, kd, magnitudes_deg, mode, seed)
                            for kd in kinds})


def _minmax_mae(clean: np.ndarray, noisy: np.ndarray) -> float:
    both = np.concatenate([clean, noisy])
    span = both.max(axis=0) - both.min(axis=0)
    ok = span > 0
    return float(np.mean(np.abs(noisy[:, ok] - clean[:, ok]) / span[ok]))


def noise_sweep(corpus, kind: str, sigmas, clip: float | None = None, seed: int = 0, k: int = 16) -> np.ndarray:
    """Mean min-max-normalised absolute feature change under Gaussian jitter.

    Each channel is scaled by its range over the clean and noisy values together.
    Jitter is unclipped unless ``clip`` is given. The clean k-NN graph is
    kept for the noisy cloud so rows and channels stay aligned; normals are
    re-estimated on both clouds, oriented toward the centroid. One standard normal
    draw per cloud is scaled by each sigma.
    """
    _check_kind(kind)
    sig = np.asarray(sigmas, dtype=np.float64)
    if np.any(sig < 0):
        raise ValueError("sigmas must be nonnegative")
    clip = np.inf if clip is None else clip
    out = np.zeros((len(corpus), len(sig)))
    for ci, cloud in enumerate(corpus):
        rng = np.random.default_rng([seed, ci])
        z = rng.normal(size=cloud.points.shape)
        base = cloud.without_normals().centered()
        nbr = knn_graph(base, k=k).neighbor_indices
        clean = _noise_features(base, kind, nbr, k)
        for si, s in enumerate(sig):
            noisy = PointCloud(base.points + np.clip(s * z, -clip, clip))
            out[ci, si] = 0.0 if s == 0 else _minmax_mae(clean, _noise_features(noisy, kind, nbr, k))
    return out.mean(axis=0)


def _noise_features(cloud: PointCloud, kind: str, nbr: np.ndarray, k: int) -> np.ndarray:
    if kind in ("ppf", "fpfh"):
        centre = cloud.points.mean(axis=0)
        moved = estimate_normals(cloud.translated(-centre), k, nbr)
        cloud = PointCloud(cloud.points, moved.normals)
    if kind == "rri":
        cloud = cloud.centered()
    return point_features(cloud, kind, nbr, k)


def noise_curve(corpus, kinds, sigmas, clip: float | None = None, seed: int = 0) -> RobustnessCurve:
    return RobustnessCurve("sigma", sigmas, {kd: noise_sweep(corpus, kd, sigmas, clip, seed) for kd in kinds})
