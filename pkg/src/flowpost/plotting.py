"""Matplotlib renderers for the CLI report paths. Figures go straight to files."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport  # noqa: E402
from .toylab import FieldGrid, RegimeResult  # noqa: E402

__all__ = [
    "plot_field_grid",
    "plot_dispersion",
    "plot_regimes",
    "plot_metrics",
    "plot_training_history",
    "plot_sigma_profile",
]

# fixed metadata keeps PNG bytes stable across runs
_SAVE_KW = dict(dpi=100, metadata={"Software": None})


def _save(fig, path) -> None:
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_field_grid(path, grid: FieldGrid, targets=None, y=None) -> None:
    """Quiver plot of the field over a density background (when available)."""
    n = grid.resolution
    xs = grid.x.reshape(n, n)
    ys = grid.y.reshape(n, n)
    fig, ax = plt.subplots(figsize=(5, 5))
    dens = grid.density.reshape(n, n)
    if np.all(np.isfinite(dens)):
        ax.pcolormesh(xs, ys, dens, shading="auto", cmap="viridis")
    step = max(1, n // 20)
    sl = (slice(None, None, step), slice(None, None, step))
    u, v = grid.u.reshape(n, n), grid.v.reshape(n, n)
    norm = np.hypot(u, v)
    scale = np.where(norm > 0, 1.0 / np.maximum(norm, 1e-12), 0.0)
    ax.quiver(xs[sl], ys[sl], (u * scale)[sl], (v * scale)[sl], color="white", width=0.004)
    if targets is not None:
        tg = np.atleast_2d(targets)
        ax.plot(tg[:, 0], tg[:, 1], "*", color="gold", markersize=14)
    if y is not None:
        ax.plot([y[0]], [y[1]], "o", color="white", markeredgecolor="k", markersize=8)
    ax.set_title(f"t = {grid.t:g}")
    ax.set_aspect("equal")
    _save(fig, path)


def plot_dispersion(path, reports: dict, targets=None) -> None:
    """Endpoint scatter, one colour per labelled report."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, rep in reports.items():
        pts = np.atleast_2d(rep.endpoints)
        ax.plot(pts[:, 0], pts[:, 1], ".", alpha=0.6,
                label=f"{label}: std={rep.std:.3g}")
    if targets is not None:
        tg = np.atleast_2d(targets)
        ax.plot(tg[:, 0], tg[:, 1], "*", color="k", markersize=12)
    ax.legend(loc="best", fontsize=8)
    ax.set_aspect("equal")
    _save(fig, path)


def plot_regimes(path, results: Sequence[RegimeResult]) -> None:
    """Angle to the target mean and to the nearest target over time."""
    fig, axes = plt.subplots(1, len(results), figsize=(4 * len(results), 3.2), squeeze=False)
    for ax, res in zip(axes[0], results):
        ax.plot(res.times, res.mean_angles, label="to mean")
        ax.plot(res.times, res.target_angles, label="to target")
        ax.axvline(res.t_star, color="k", linestyle="--", linewidth=0.8)
        ax.set_title(f"sigma = {res.sigma:g}, t* = {res.t_star:.3f}")
        ax.set_xlabel("t")
        ax.set_ylabel("angle (deg)")
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_metrics(path, report: MetricsReport) -> None:
    """Per-metric bar of the mean with a 95% interval."""
    names = MetricsReport.METRICS
    fig, axes = plt.subplots(1, len(names), figsize=(2.6 * len(names), 3), squeeze=False)
    for ax, name in zip(axes[0], names):
        vals = [row[name] for row in report.rows]
        ax.bar([0], [report.mean[name]], yerr=[report.ci95[name]], color="tab:blue", capsize=4)
        ax.plot(np.zeros(len(vals)), vals, "k.", alpha=0.5)
        ax.set_xticks([])
        ax.set_title(name, fontsize=9)
    fig.tight_layout()
    _save(fig, path)


def plot_training_history(path, history: Sequence) -> None:
    steps, losses = zip(*history) if history else ((), ())
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.semilogy(steps, losses, marker=".")
    ax.set_xlabel("step")
    ax.set_ylabel("held-out loss")
    fig.tight_layout()
    _save(fig, path)


def plot_sigma_profile(path, values, sample_rate: int | None = None) -> None:
    values = np.asarray(values, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3))
    if sample_rate and values.size > 1:
        freqs = np.linspace(0, sample_rate / 2, values.size)
        ax.plot(freqs, values)
        ax.set_xlabel("frequency (Hz)")
    else:
        ax.plot(values, marker="." if values.size < 3 else None)
        ax.set_xlabel("row")
    ax.set_ylabel("sigma")
    fig.tight_layout()
    _save(fig, path)
