"""Point-cloud containers, SE(3) algebra, FPS, KNN graphs and PCA normals."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

_TREE_MIN = 256
_CHUNK = 256


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    # rows whose normal came from the degenerate-covariance fallback
    normal_fallback: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] < 1:
            raise ValueError("PointCloud needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("PointCloud contains non-finite coordinates")
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if n.shape != self.points.shape:
                raise ValueError(
                    f"normals shape {n.shape} does not match points shape {self.points.shape}")
            if not np.allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-6):
                raise ValueError("normals must be unit length")
            self.normals = n

    def __len__(self):
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals)

    def translated(self, offset) -> "PointCloud":
        return PointCloud(self.points + np.asarray(offset, dtype=np.float64), self.normals)

    def centered(self) -> "PointCloud":
        return self.translated(-self.points.mean(axis=0))

    def without_normals(self) -> "PointCloud":
        return PointCloud(self.points)


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (np.allclose(r.T @ r, np.eye(3), atol=tol)
                and abs(np.linalg.det(r) - 1.0) <= tol)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def to_text(self) -> str:
        vals = np.concatenate([self.rotation.ravel(), self.translation])
        return " ".join(repr(float(v)) for v in vals) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RigidTransform":
        vals = np.array([float(v) for v in text.split()], dtype=np.float64)
        if vals.size != 12:
            raise ValueError(f"transform text needs 12 numbers, got {vals.size}")
        return cls(vals[:9].reshape(3, 3), vals[9:])


@dataclass
class NeighborGraph:
    center_indices: np.ndarray
    neighbor_indices: np.ndarray
    k: int

    def __post_init__(self):
        self.center_indices = np.asarray(self.center_indices, dtype=np.int64)
        self.neighbor_indices = np.asarray(self.neighbor_indices, dtype=np.int64)
        if self.neighbor_indices.shape != (len(self.center_indices), self.k):
            raise ValueError(
                f"neighbor matrix shape {self.neighbor_indices.shape} "
                f"!= ({len(self.center_indices)}, {self.k})")


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals @ t.rotation.T
    return PointCloud(t.apply(cloud.points), normals)


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _check_interval(name, interval, lo=None, hi=None):
    a, b = (float(v) for v in interval)
    if not (np.isfinite(a) and np.isfinite(b)) or a > b:
        raise ValueError(f"{name} must be an ordered finite interval, got {interval}")
    if lo is not None and a < lo or hi is not None and b > hi:
        raise ValueError(f"{name} must lie within [{lo}, {hi}], got {interval}")
    return a, b


def random_se3(rot_range_deg=(0.0, 180.0), trans_range=(-0.5, 0.5), rng=None) -> RigidTransform:
    """Random rigid transform: uniform axis on the sphere, uniform angle, uniform translation."""
    lo, hi = _check_interval("rot_range_deg", rot_range_deg, 0.0, 180.0)
    tlo, thi = _check_interval("trans_range", trans_range)
    rng = np.random.default_rng(rng)
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = np.deg2rad(rng.uniform(lo, hi))
    trans = rng.uniform(tlo, thi, size=3)
    return RigidTransform(axis_angle_matrix(axis, angle), trans)


def rotation_angle(rotation) -> float:
    c = (np.trace(rotation) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def farthest_point_sample(cloud, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy max-min subset selection; ties go to the lower index."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"farthest_point_sample needs 1 <= k <= N, got k={k}, N={n}")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range for N={n}")
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start_index
    mind = np.sum((pts - pts[start_index]) ** 2, axis=1)
    for s in range(1, k):
        nxt = int(np.argmax(mind))
        selected[s] = nxt
        np.minimum(mind, np.sum((pts - pts[nxt]) ** 2, axis=1), out=mind)
    return selected


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit differences keep exact ties exact
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def knn_graph(cloud, centers=None, k: int = 16) -> NeighborGraph:
    """K nearest neighbours of each center (self excluded, ties to lower index)."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if k < 1 or k >= n:
        raise ValueError(f"knn_graph needs 1 <= k < N, got k={k}, N={n}")
    centers = np.arange(n) if centers is None else np.asarray(centers, dtype=np.int64)
    if n >= _TREE_MIN and k + 2 < n:
        out, bad = _tree_knn(pts, centers, k)
    else:
        out, bad = np.empty((len(centers), k), dtype=np.int64), np.arange(len(centers))
    for s in range(0, len(bad), _CHUNK):
        rows = bad[s:s + _CHUNK]
        c = centers[rows]
        d = _sq_dists(pts[c], pts)
        d[np.arange(len(c)), c] = np.inf
        out[rows] = _smallest_k(d, k)
    return NeighborGraph(centers, out, k)


def _tree_knn(pts: np.ndarray, centers: np.ndarray, k: int):
    """KD-tree candidates re-ranked with exact distances.

    Rows whose k-th and (k+1)-th exact distances are not clearly separated, or whose
    candidate list misses the center itself, are returned in ``bad`` for the
    brute-force path, so the result always equals the exhaustive search.
    """
    _, cand = cKDTree(pts).query(pts[centers], k=k + 2)
    diff = pts[cand] - pts[centers][:, None, :]
    d = np.einsum("ijk,ijk->ij", diff, diff)
    is_self = cand == centers[:, None]
    has_self = is_self.any(axis=1)
    d[is_self] = np.inf
    order = np.lexsort((cand, d), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    d = np.take_along_axis(d, order, axis=1)
    # the (k+1)-th remaining candidate bounds every point outside the list
    gap = d[:, k] - d[:, k - 1]
    ok = has_self & (gap > 1e-9 * np.maximum(d[:, k], 1e-300))
    return cand[:, :k].copy(), np.nonzero(~ok)[0]


def _smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k smallest entries per row, ordered by (value, index)."""
    if k >= d.shape[1] // 4:
        return np.argsort(d, axis=1, kind="stable")[:, :k]
    kth = np.partition(d, k - 1, axis=1)[:, k - 1:k]
    # every entry tied with the k-th value stays a candidate, so ties resolve by index
    cand = d <= kth
    counts = cand.sum(axis=1)
    width = int(counts.max())
    rows, cols = np.nonzero(cand)
    slot = np.arange(len(rows)) - np.repeat(np.cumsum(counts) - counts, counts)
    cd = np.full((len(d), width), np.inf)
    ci = np.full((len(d), width), np.iinfo(np.int64).max)
    cd[rows, slot] = d[rows, cols]
    ci[rows, slot] = cols
    order = np.lexsort((ci, cd), axis=1)[:, :k]
    return np.take_along_axis(ci, order, axis=1)


def nearest_indices(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Index into ``ref`` of the nearest point for every query row (ties to lower index)."""
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if len(ref) >= _TREE_MIN:
        _, cand = cKDTree(ref).query(query, k=2)
        diff = ref[cand] - query[:, None, :]
        d = np.einsum("ijk,ijk->ij", diff, diff)
        out = np.where(d[:, 0] <= d[:, 1], cand[:, 0], cand[:, 1])
        bad = np.nonzero(np.abs(d[:, 1] - d[:, 0]) <= 1e-9 * np.maximum(d.max(axis=1), 1e-300))[0]
    else:
        out, bad = np.empty(len(query), dtype=np.int64), np.arange(len(query))
    for s in range(0, len(bad), _CHUNK):
        rows = bad[s:s + _CHUNK]
        out[rows] = np.argmin(_sq_dists(query[rows], ref), axis=1)
    return out


def nearest_distances(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    return cKDTree(ref).query(query)[0]


def estimate_normals(cloud: PointCloud, k: int = 16, neighbors: np.ndarray | None = None) -> PointCloud:
    """PCA normals over the point and its k-1 nearest neighbours, oriented toward the origin.

    Neighbourhoods with zero covariance get the normal (0, 0, 1); their rows are
    marked in ``normal_fallback`` on the returned cloud. A precomputed KNN matrix
    (sorted by distance, self excluded) may be passed to skip the search.
    """
    if k < 3:
        raise ValueError(f"estimate_normals needs k >= 3, got {k}")
    pts = cloud.points
    n = len(pts)
    kk = min(k - 1, n - 1)
    if neighbors is not None and neighbors.shape[1] >= kk:
        nbr = neighbors[:, :kk]
        idx = np.concatenate([np.arange(n)[:, None], nbr], axis=1)
    elif kk >= 1:
        nbr = knn_graph(pts, k=kk).neighbor_indices
        idx = np.concatenate([np.arange(n)[:, None], nbr], axis=1)
    else:
        idx = np.zeros((1, 1), dtype=np.int64)
    local = pts[idx]
    local = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local) / idx.shape[1]
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0].copy()
    scale = np.maximum(np.abs(pts).max(), 1.0)
    degenerate = np.trace(cov, axis1=1, axis2=2) <= 1e-24 * scale ** 2
    normals[degenerate] = (0.0, 0.0, 1.0)
    flip = np.einsum("ij,ij->i", normals, pts) > 0
    flip &= ~degenerate
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if degenerate.any():
        log.debug("estimate_normals: %d degenerate neighbourhoods", int(degenerate.sum()))
    out = PointCloud(pts, normals)
    out.normal_fallback = degenerate
    return out
