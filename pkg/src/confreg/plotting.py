"""Figures written next to the CSV/JSON outputs of ``evaluate`` and ``simulate``."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

FIGSIZE = (5.0, 4.2)
DPI = 150
# fixed metadata keeps repeated renders byte-stable
_META = {"Software": None}


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, metadata=_META)
    return path


def scatter_true_vs_pred(y_true, y_pred, path, r: float | None = None) -> Path:
    """True vs predicted values, colored by absolute error, with the identity line."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    err = np.abs(y_true - y_pred)

    fig = Figure(figsize=FIGSIZE)
    ax = fig.subplots()
    sc = ax.scatter(y_true, y_pred, c=err, cmap="viridis", s=12, alpha=0.8, edgecolors="none")
    lo = float(min(y_true.min(), y_pred.min()))
    hi = float(max(y_true.max(), y_pred.max()))
    ax.plot([lo, hi], [lo, hi], "r--", lw=1.2, label="perfect prediction")
    ax.set_xlabel("true value")
    ax.set_ylabel("predicted value")
    if r is not None:
        ax.set_title(f"Pearson R = {r:.2f}")
    ax.legend(loc="upper left", frameon=False)
    fig.colorbar(sc, ax=ax, label="absolute error")
    return _save(fig, path)


def error_vs_width(errors, widths, path) -> Path:
    fig = Figure(figsize=FIGSIZE)
    ax = fig.subplots()
    ax.scatter(widths, errors, s=10, alpha=0.6, edgecolors="none")
    ax.set_xlabel("interval width")
    ax.set_ylabel("absolute error")
    return _save(fig, path)


def face_off(rows, path) -> Path:
    """Coverage against nominal level, and mean width, for each strategy."""
    strategies = list(dict.fromkeys(r.strategy for r in rows))
    levels = sorted({1 - r.alpha for r in rows})

    fig = Figure(figsize=(9.0, 3.8))
    ax_cov, ax_w = fig.subplots(1, 2)
    ax_cov.plot(levels, levels, "k:", lw=1, label="nominal")
    offsets = np.linspace(-0.004, 0.004, len(strategies))
    for off, s in zip(offsets, strategies):
        sel = sorted((r for r in rows if r.strategy == s), key=lambda r: r.alpha, reverse=True)
        x = np.array([1 - r.alpha for r in sel])
        ax_cov.errorbar(x + off, [r.coverage_mean for r in sel], yerr=[3 * r.coverage_stderr for r in sel],
                        fmt="o", ms=4, capsize=3, label=s)
        ax_w.plot(x, [r.width_mean for r in sel], "o-", ms=4, label=s)
    ax_cov.set_xlabel("nominal coverage")
    ax_cov.set_ylabel("empirical coverage (mean ± 3 se)")
    ax_cov.legend(frameon=False, fontsize=8)
    ax_w.set_xlabel("nominal coverage")
    ax_w.set_ylabel("mean interval width")
    ax_w.legend(frameon=False, fontsize=8)
    return _save(fig, path)
