"""End-to-end training with the cycle registration loss plus the inlier loss."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor
from .geom import RigidTransform
from .match import MatchMatrix, RegisterConfig, encode, match_direction, register
from .metrics import rmse_error, rotation_error, translation_error

log = logging.getLogger(__name__)

RECORD_FIELDS = ("epoch", "loss", "loss_rg", "loss_il", "val_LR", "val_Lt", "val_RMSE")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, pair_id, epoch=None):
        super().__init__(f"non-finite loss on pair {pair_id}" + (f" in epoch {epoch}" if epoch is not None else ""))
        self.pair_id = pair_id
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    omega: float = 0.01
    rot_range: tuple = (0.0, 180.0)
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be nonnegative")
        if self.omega < 0:
            raise ValueError("omega must be nonnegative")
        lo, hi = self.rot_range
        if not 0 <= lo <= hi <= 180:
            raise ValueError(f"rotation range must lie in [0, 180], got {self.rot_range}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class TrainRecord:
    rows: list = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epoch index must increase")
        self.rows.append(row)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RECORD_FIELDS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [f"{r[k]:.10g}" for k in RECORD_FIELDS[1:]])


def registration_loss(source_points, rotation, translation, t_gt: RigidTransform) -> Tensor:
    """Mean over points of the l1 distance between predicted and true placements."""
    x = dc.as_tensor(source_points)
    pred = dc.matmul(x, dc.transpose(dc.as_tensor(rotation))) + dc.as_tensor(translation)
    target = Tensor(t_gt.apply(x.data))
    return dc.reduce_sum(dc.abs(pred - target)) * (1.0 / x.shape[0])


def inlier_loss(m) -> Tensor:
    """(1/M) sum_j (1 - column mass) + (1/N) sum_i (1 - row mass) over the non-slack block."""
    if isinstance(m, MatchMatrix):
        core = Tensor(m.core)
    else:
        core = dc.as_tensor(m)
    n, k = core.shape
    col = dc.reduce_sum(core, axis=0)
    row = dc.reduce_sum(core, axis=1)
    return (1.0 - dc.mean(col)) + (1.0 - dc.mean(row))


def pair_loss(pair, params: ParamStore, reg_cfg: RegisterConfig, omega: float):
    """Total cycle loss for one pair; returns (total, l_rg, l_il) tensors."""
    dx = encode(pair.source, reg_cfg, params)
    dy = encode(pair.target, reg_cfg, params)
    xs, ys = pair.source.points, pair.target.points
    r_xy, t_xy, m_xy = match_direction(dx, dy, xs, ys, reg_cfg)
    r_yx, t_yx, m_yx = match_direction(dy, dx, ys, xs, reg_cfg)
    l_rg = registration_loss(xs, r_xy, t_xy, pair.gt) + registration_loss(ys, r_yx, t_yx, pair.gt.inverse())
    l_il = inlier_loss(m_xy) + inlier_loss(m_yx)
    return l_rg + omega * l_il, l_rg, l_il


def _batches(items, size):
    batch = []
    for it in items:
        batch.append(it)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


def train_epoch(pairs, params: ParamStore, cfg: TrainConfig, reg_cfg: RegisterConfig | None = None,
                epoch: int = 0) -> dict:
    """One pass over ``pairs``: per batch, average gradients then take one Adam step."""
    reg_cfg = reg_cfg or RegisterConfig()
    totals = {"loss": 0.0, "loss_rg": 0.0, "loss_il": 0.0}
    count = 0
    for batch in _batches(pairs, cfg.batch_size):
        params.zero_grad()
        for pair in batch:
            total, l_rg, l_il = pair_loss(pair, params, reg_cfg, cfg.omega)
            if not np.isfinite(total.data):
                raise NonFiniteLossError(getattr(pair, "pair_id", count), epoch)
            dc.backward(total * (1.0 / len(batch)))
            totals["loss"] += float(total.data)
            totals["loss_rg"] += float(l_rg.data)
            totals["loss_il"] += float(l_il.data)
            count += 1
        dc.adam_step(params, params.grads(), lr=cfg.lr)
        if not params.all_finite():
            raise NonFiniteLossError(getattr(batch[-1], "pair_id", count), epoch)
    if count == 0:
        raise ValueError("train_epoch needs a nonempty dataset")
    return {"epoch": epoch, **{k: v / count for k, v in totals.items()}}


def evaluate_pairs(pairs, params: ParamStore, reg_cfg: RegisterConfig | None = None):
    """Per-pair (L_R radians, L_t, L_RMSE) and the predicted transforms."""
    reg_cfg = reg_cfg or RegisterConfig()
    rows, preds = [], []
    for pair in pairs:
        pred, _ = register(pair.source, pair.target, params, reg_cfg)
        preds.append(pred)
        rows.append((rotation_error(pair.gt.rotation, pred.rotation),
                     translation_error(pair.gt.translation, pred.translation),
                     rmse_error(pair.source, pair.gt, pred)))
    return np.array(rows).reshape(-1, 3), preds


def fit(train_source, params: ParamStore, cfg: TrainConfig, reg_cfg: RegisterConfig | None = None,
        val_pairs=None, on_epoch=None) -> TrainRecord:
    """Train for ``cfg.epochs`` epochs.

    ``train_source`` is either a fixed list of pairs or a callable ``epoch -> pairs``
    (fresh augmentation per epoch).
    """
    record = TrainRecord()
    if cfg.lr == 0:
        log.warning("learning rate is 0: parameters will not change")
    for epoch in range(1, cfg.epochs + 1):
        pairs = train_source(epoch) if callable(train_source) else train_source
        row = train_epoch(pairs, params, cfg, reg_cfg, epoch)
        if val_pairs:
            errs, _ = evaluate_pairs(val_pairs, params, reg_cfg)
            row.update(val_LR=math.degrees(errs[:, 0].mean()), val_Lt=errs[:, 1].mean(),
                       val_RMSE=errs[:, 2].mean())
        else:
            row.update(val_LR=float("nan"), val_Lt=float("nan"), val_RMSE=float("nan"))
        record.append(row)
        log.info("epoch %d loss %.5f rg %.5f il %.5f val_LR %.3f", epoch, row["loss"],
                 row["loss_rg"], row["loss_il"], row["val_LR"])
        if on_epoch is not None:
            on_epoch(epoch, row)
    return record
