"""PNG figures for robustness curves, training records and metric reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_curve(curve, path, ylabel: str | None = None, title: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for name, vals in curve.series.items():
        ax.plot(curve.magnitudes, vals, marker="o", ms=3, label=name)
    ax.set_xlabel(curve.variable)
    ax.set_ylabel(ylabel or ("similarity" if curve.variable.startswith("rotation") else "normalised MAE"))
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_training(record, path) -> None:
    ep = record.column("epoch")
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.6))
    for name in ("loss", "loss_rg", "loss_il"):
        a1.plot(ep, record.column(name), label=name)
    a1.set_xlabel("epoch")
    a1.set_yscale("log")
    a1.legend(fontsize=8)
    a1.grid(alpha=0.3)
    val = record.column("val_LR")
    if np.isfinite(val).any():
        a2.plot(ep, val, color="tab:red")
        a2.set_ylabel("validation mean rotation error (deg)")
    a2.set_xlabel("epoch")
    a2.grid(alpha=0.3)
    _save(fig, path)


def plot_metrics(reports: dict, path) -> None:
    """Histogram of per-pair rotation errors for one or more named reports."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    arrays = {k: np.degrees(r.array[:, 0]) for k, r in reports.items() if len(r.rows)}
    if arrays:
        bins = np.linspace(0, 180, 37)
        for name, deg in arrays.items():
            ax.hist(deg, bins=bins, alpha=0.6, label=f"{name} (mean {deg.mean():.2f})")
        ax.legend(fontsize=8)
    ax.set_xlabel("rotation error (deg)")
    ax.set_ylabel("pairs")
    _save(fig, path)
