"""Descriptor matching: cost assembly, Sinkhorn with outlier slack, soft correspondences, weighted Procrustes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor
from .geom import PointCloud, RigidTransform
from .net import CloudGraphs, Descriptor, HGMConfig, hgm_forward, prepare_cloud

log = logging.getLogger(__name__)


class DegenerateCorrespondenceError(ValueError):
    """Raised when the weighted cross-covariance cannot fix a rotation."""


@dataclass
class MatchMatrix:
    weights: np.ndarray
    slack: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("match weights must be finite and nonnegative")

    @property
    def core(self) -> np.ndarray:
        return self.weights[:-1, :-1] if self.slack else self.weights

    def to_csv(self, path, threshold: float = 1e-3) -> None:
        core = self.core
        i, j = np.nonzero(core > threshold)
        with open(path, "w") as fh:
            fh.write("i,j,weight\n")
            for a, b in zip(i, j):
                fh.write(f"{a},{b},{core[a, b]:.9g}\n")


@dataclass
class Correspondences:
    targets: np.ndarray
    confidences: np.ndarray
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.valid is None:
            self.valid = self.confidences > 0


@dataclass
class RegisterConfig:
    hgm: HGMConfig = field(default_factory=HGMConfig)
    sinkhorn_iters: int = 5
    slack_alpha: float = 1.0
    slack: bool = True
    # per-block cost weights (unary, s1, s2, s3); None means all ones
    lambdas: tuple | None = None


# -- cost ---------------------------------------------------------------------

def _block_sqdist(a: Tensor, b: Tensor) -> Tensor:
    aa = dc.reduce_sum(dc.square(a), axis=1, keepdims=True)
    bb = dc.reshape(dc.reduce_sum(dc.square(b), axis=1), (1, b.shape[0]))
    return dc.relu(aa + bb - 2.0 * dc.matmul(a, dc.transpose(b)))


def match_cost(desc_x: Descriptor, desc_y: Descriptor, lambdas=None) -> Tensor:
    """Sum over descriptor blocks of lambda * squared distance / sqrt(block width)."""
    if desc_x.sizes != desc_y.sizes:
        raise ValueError(f"descriptor layouts differ: {desc_x.sizes} vs {desc_y.sizes}")
    blocks = list(zip(desc_x.blocks, desc_y.blocks))
    lambdas = (1.0,) * len(blocks) if lambdas is None else tuple(lambdas)
    if len(lambdas) != len(blocks):
        raise ValueError(f"need {len(blocks)} lambda weights, got {len(lambdas)}")
    cost = None
    for lam, (a, b) in zip(lambdas, blocks):
        term = _block_sqdist(a, b) * (lam / np.sqrt(a.shape[1]))
        cost = term if cost is None else cost + term
    return cost


# -- assignment ---------------------------------------------------------------

def log_assignment(cost, alpha: float = 1.0, slack: bool = True) -> Tensor:
    """Log of the initial assignment: -cost, padded with a slack row/column at -alpha."""
    cost = dc.as_tensor(cost)
    logm = -cost
    if not slack:
        return logm
    n, m = cost.shape
    logm = dc.concat([logm, Tensor(np.full((n, 1), -alpha))], axis=1)
    return dc.concat([logm, Tensor(np.full((1, m + 1), -alpha))], axis=0)


def init_assignment(cost, alpha: float = 1.0, slack: bool = True) -> MatchMatrix:
    c = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ValueError("init_assignment needs finite costs")
    w = np.exp(-c)
    if slack:
        n, m = c.shape
        w = np.pad(w, ((0, 1), (0, 1)), constant_values=np.exp(-alpha))
    return MatchMatrix(w, slack)


def sinkhorn_log(logm: Tensor, iters: int, slack: bool) -> Tensor:
    """Alternating row/column normalisation in the log domain.

    With slack the last row and column are outlier bins: rows 0..N-1 are
    normalised over all columns, columns 0..M-1 over all rows, and the slack
    corner is never normalised. The result is capped so no non-slack row holds
    more than unit mass.
    """
    if iters < 1:
        raise ValueError("sinkhorn needs iters >= 1")
    for _ in range(iters):
        if slack:
            rows = logm[:-1, :]
            rows = rows - dc.logsumexp(rows, axis=1, keepdims=True)
            logm = dc.concat([rows, logm[-1:, :]], axis=0)
            cols = logm[:, :-1]
            cols = cols - dc.logsumexp(cols, axis=0, keepdims=True)
            logm = dc.concat([cols, logm[:, -1:]], axis=1)
        else:
            logm = logm - dc.logsumexp(logm, axis=1, keepdims=True)
            logm = logm - dc.logsumexp(logm, axis=0, keepdims=True)
    w = dc.exp(logm)
    core = w[:-1, :-1] if slack else w
    cap = dc.maximum(dc.reduce_sum(core, axis=1, keepdims=True), 1.0)
    return core / cap


def sinkhorn(m: MatchMatrix, iters: int = 5) -> MatchMatrix:
    w = m.weights.copy()
    rows = w[:-1] if m.slack else w
    empty = rows.sum(axis=1) <= 0
    if empty.any():
        log.warning("sinkhorn: %d all-zero rows replaced by a uniform row", int(empty.sum()))
        rows[empty] = 1.0
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    core = sinkhorn_log(Tensor(logw), iters, m.slack).data
    if not m.slack:
        return MatchMatrix(core, False)
    # rebuild the slack border from the final normalised state
    n, k = core.shape
    out = np.zeros((n + 1, k + 1))
    out[:n, :k] = core
    out[:n, k] = np.clip(1.0 - core.sum(axis=1), 0.0, None)
    out[n, :k] = np.clip(1.0 - core.sum(axis=0), 0.0, None)
    out[n, k] = w[-1, -1]
    return MatchMatrix(out, True)


# -- correspondences and pose -------------------------------------------------

def soft_correspondences_t(core: Tensor, target_points) -> tuple[Tensor, Tensor]:
    """Differentiable barycentres and confidences from a normalised match block."""
    conf = dc.reduce_sum(core, axis=1)
    num = dc.matmul(core, dc.as_tensor(target_points))
    denom = dc.maximum(dc.reshape(conf, (-1, 1)), 1e-12)
    return num / denom, conf


def soft_correspondences(m: MatchMatrix, target: PointCloud) -> Correspondences:
    core = m.core
    conf = core.sum(axis=1)
    valid = conf > 0
    bary = np.full((len(core), 3), np.nan)
    bary[valid] = (core[valid] @ target.points) / conf[valid, None]
    return Correspondences(bary, conf, valid)


def _rotation_vjp(r, u, sig, gr):
    """Gradient of the special polar rotation with respect to the cross-covariance."""
    denom = sig[:, None] + sig[None, :]
    scale = np.maximum(np.abs(sig).max(), 1e-300)
    tiny = np.abs(denom) < 1e-6 * scale
    np.fill_diagonal(tiny, False)
    if tiny.any():
        log.warning("procrustes: near-degenerate spectrum, clamping rotation gradient")
        denom = np.where(tiny, np.copysign(1e-6 * scale, denom + 1e-300), denom)
    k = 1.0 / denom
    np.fill_diagonal(k, 0.0)
    b = r.T @ gr
    y = u @ (k * (u.T @ b @ u)) @ u.T
    gm = r @ (y - y.T)
    return gm.T


def rotation_from_covariance(h) -> Tensor:
    """R = V diag(1, 1, det(V U^T)) U^T for H = U S V^T, with its exact gradient."""
    h = dc.as_tensor(h)
    u, s, vt = np.linalg.svd(h.data)
    if s[0] <= 0 or s[1] <= 1e-10 * s[0]:
        raise DegenerateCorrespondenceError(
            f"cross-covariance is rank deficient (singular values {s}); correspondences are degenerate")
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T)) or 1.0
    r = v @ np.diag([1.0, 1.0, d]) @ u.T
    sig = s * np.array([1.0, 1.0, d])
    return dc.custom_op(r, (h,), lambda g: (_rotation_vjp(r, u, sig, g),))


def weighted_procrustes_t(source_points, targets: Tensor, conf: Tensor) -> tuple[Tensor, Tensor]:
    x = dc.as_tensor(source_points)
    y = dc.as_tensor(targets)
    c = dc.reshape(dc.as_tensor(conf), (-1, 1))
    total = dc.reduce_sum(c)
    if total.data <= 0:
        raise DegenerateCorrespondenceError("all correspondence confidences are zero")
    chat = c / total
    xbar = dc.reduce_sum(chat * x, axis=0, keepdims=True)
    ybar = dc.reduce_sum(chat * y, axis=0, keepdims=True)
    h = dc.matmul(dc.transpose(c * (x - xbar)), y - ybar)
    r = rotation_from_covariance(h)
    t = dc.reshape(ybar, (3,)) - dc.reshape(dc.matmul(xbar, dc.transpose(r)), (3,))
    return r, t


def weighted_procrustes(source: PointCloud, corr: Correspondences) -> RigidTransform:
    conf = np.where(corr.valid, corr.confidences, 0.0)
    targets = np.where(corr.valid[:, None], corr.targets, 0.0)
    r, t = weighted_procrustes_t(source.points, Tensor(targets), Tensor(conf))
    return RigidTransform(r.data, t.data)


# -- full pipeline ------------------------------------------------------------

def encode(cloud: PointCloud, cfg: RegisterConfig, params: ParamStore,
           graphs: CloudGraphs | None = None) -> Descriptor:
    """Descriptor of one cloud, computed on a centroid-centred copy."""
    if graphs is None:
        graphs = prepare_cloud(cloud.centered(), cfg.hgm)
    return hgm_forward(cloud, cfg.hgm, params, graphs=graphs)


def match_direction(desc_x: Descriptor, desc_y: Descriptor, source_points, target_points,
                    cfg: RegisterConfig):
    """One direction of the pipeline; returns (R, t, normalised match block)."""
    cost = match_cost(desc_x, desc_y, cfg.lambdas)
    core = sinkhorn_log(log_assignment(cost, cfg.slack_alpha, cfg.slack), cfg.sinkhorn_iters, cfg.slack)
    bary, conf = soft_correspondences_t(core, target_points)
    r, t = weighted_procrustes_t(source_points, bary, conf)
    return r, t, core


def _as_match(core: np.ndarray, slack: bool) -> MatchMatrix:
    if not slack:
        return MatchMatrix(core, False)
    n, m = core.shape
    out = np.zeros((n + 1, m + 1))
    out[:n, :m] = core
    out[:n, m] = np.clip(1.0 - core.sum(axis=1), 0.0, None)
    out[n, :m] = np.clip(1.0 - core.sum(axis=0), 0.0, None)
    return MatchMatrix(out, True)


def register(source: PointCloud, target: PointCloud, params: ParamStore,
             config: RegisterConfig | None = None) -> tuple[RigidTransform, MatchMatrix]:
    """One-shot registration of ``source`` onto ``target`` with shared encoder weights."""
    cfg = config or RegisterConfig()
    dx = encode(source, cfg, params)
    dy = encode(target, cfg, params)
    r, t, core = match_direction(dx, dy, source.points, target.points, cfg)
    return RigidTransform(r.data, t.data), _as_match(core.data, cfg.slack)
