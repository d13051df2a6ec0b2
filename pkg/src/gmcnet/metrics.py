"""Registration error metrics, metric reports and the point-to-point ICP baseline."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom import PointCloud, RigidTransform


def rotation_error(r_gt, r_pred) -> float:
    """Isotropic rotation error arccos((tr(R_gt^-1 R_pred) - 1) / 2) in radians."""
    r_gt = np.asarray(r_gt, dtype=np.float64)
    r_pred = np.asarray(r_pred, dtype=np.float64)
    c = 0.5 * (np.trace(r_gt.T @ r_pred) - 1.0)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def translation_error(t_gt, t_pred) -> float:
    return float(np.linalg.norm(np.asarray(t_gt, dtype=np.float64) - np.asarray(t_pred, dtype=np.float64)))


def rmse_error(source, t_gt: RigidTransform, t_pred: RigidTransform) -> float:
    """(1/N) * sqrt(sum_i |T_gt(x_i) - T_pred(x_i)|^2), with 1/N outside the root as printed."""
    pts = source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=np.float64)
    d = t_gt.apply(pts) - t_pred.apply(pts)
    return float(np.sqrt(np.sum(d * d)) / len(pts))


@dataclass
class MetricReport:
    pair_ids: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    def add(self, pair_id, source, t_gt: RigidTransform, t_pred: RigidTransform) -> None:
        self.pair_ids.append(str(pair_id))
        self.rows.append((rotation_error(t_gt.rotation, t_pred.rotation),
                          translation_error(t_gt.translation, t_pred.translation),
                          rmse_error(source, t_gt, t_pred)))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.float64).reshape(-1, 3)

    def summary(self) -> dict:
        a = self.array
        if not len(a):
            return {"pairs": 0}
        deg = np.degrees(a[:, 0])
        return {
            "pairs": len(a),
            "LR_deg_mean": float(deg.mean()),
            "LR_deg_median": float(np.median(deg)),
            "Lt_mean": float(a[:, 1].mean()),
            "Lt_median": float(np.median(a[:, 1])),
            "LRMSE_mean": float(a[:, 2].mean()),
            "LRMSE_median": float(np.median(a[:, 2])),
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_id", "LR_deg", "Lt", "LRMSE"])
            for pid, (lr, lt, rm) in zip(self.pair_ids, self.rows):
                w.writerow([pid, repr(math.degrees(lr)), repr(lt), repr(rm)])

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform taking ``src`` rows onto ``dst`` rows."""
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    h = (src - ms).T @ (dst - md)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, md - r @ ms)


def icp_baseline(source: PointCloud, target: PointCloud, max_iters: int = 50, tol: float = 1e-8,
                 init: RigidTransform | None = None, return_iters: bool = False):
    """Point-to-point ICP from ``init`` (identity by default).

    Stops when the incremental update moves the source by less than ``tol``
    (rotation angle plus translation norm) or after ``max_iters`` iterations.
    """
    tree = cKDTree(target.points)
    current = init or RigidTransform.identity()
    iters = 0
    for iters in range(1, max_iters + 1):
        moved = current.apply(source.points)
        _, idx = tree.query(moved)
        step = kabsch(moved, target.points[idx])
        current = step.compose(current)
        delta = math.acos(np.clip(0.5 * (np.trace(step.rotation) - 1.0), -1.0, 1.0))
        if delta + np.linalg.norm(step.translation) < tol:
            break
    return (current, iters) if return_iters else current
