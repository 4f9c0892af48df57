"""Summary figures, rendered off-screen with the Agg canvas."""

from __future__ import annotations

import math
from pathlib import Path

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .trace import RUNGS

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
MODE_COLORS = {"closed_loop": "#1b6ca8", "open_loop": "#d98c1f", "single_agent": "#7a7a7a"}
RUNG_COLORS = ("#9ecae1", "#4292c6", "#08519c", "#cb181d")


def _figure(width: float = 6.4, height: float | None = None) -> Figure:
    fig = Figure(figsize=(width, height or width * GOLDEN), facecolor="w")
    FigureCanvasAgg(fig)
    return fig


def _tidy(ax) -> None:
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.xaxis.set_ticks_position("bottom")
    ax.yaxis.set_ticks_position("left")


def _binomial_halfwidth(p: float, n: int) -> float:
    """Normal-approximation 95% half-width, in percentage points."""
    return 0.0 if n == 0 else 196.0 * math.sqrt(max(p * (1.0 - p), 0.0) / n)


def _row_name(row) -> str:
    return f"{row.scenario}\np={row.p_drop:.2f}"


def plot_success(summary, path) -> Path:
    groups = list(dict.fromkeys((r.scenario, r.p_drop) for r in summary.rows))
    modes = list(dict.fromkeys(r.mode for r in summary.rows))
    by_key = {(r.scenario, r.p_drop, r.mode): r for r in summary.rows}
    width = 0.8 / max(len(modes), 1)
    fig = _figure(max(6.4, 1.4 * len(groups) * max(len(modes), 1)))
    ax = fig.add_subplot(1, 1, 1)
    for j, mode in enumerate(modes):
        xs, ys, errs = [], [], []
        for i, (scen, p) in enumerate(groups):
            r = by_key.get((scen, p, mode))
            if r is None:
                continue
            xs.append(i + (j - (len(modes) - 1) / 2) * width)
            ys.append(100.0 * r.success_rate)
            errs.append(_binomial_halfwidth(r.success_rate, r.episodes))
        ax.bar(xs, ys, width * 0.95, yerr=errs, capsize=3, label=mode,
               color=MODE_COLORS.get(mode, "#444444"))
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels([f"{s}\np={p:.2f}" for s, p in groups], fontsize=8)
    ax.set_ylabel("task success (%)")
    ax.set_ylim(0, 105)
    ax.legend(frameon=False, fontsize=8)
    _tidy(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return Path(path)


def plot_recovery(summary, path) -> Path:
    rows = summary.rows
    fig = _figure(max(6.4, 1.1 * len(rows)))
    ax = fig.add_subplot(1, 1, 1)
    xs = range(len(rows))
    bottom = [0.0] * len(rows)
    for rung, color in zip(RUNGS, RUNG_COLORS):
        per_ep = [r.recovery.get(rung, 0) / r.episodes if r.episodes else 0.0 for r in rows]
        ax.bar(xs, per_ep, 0.6, bottom=bottom, label=rung, color=color)
        bottom = [b + v for b, v in zip(bottom, per_ep)]
    ax.set_xticks(list(xs))
    ax.set_xticklabels([f"{_row_name(r)}\n{r.mode}" for r in rows], fontsize=7)
    ax.set_ylabel("recovery actions per episode")
    ax.legend(frameon=False, fontsize=8)
    _tidy(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return Path(path)


def plot_summary(summary, outdir, stem: str = "summary") -> dict[str, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    return {"success_png": plot_success(summary, outdir / f"{stem}_success.png"),
            "recovery_png": plot_recovery(summary, outdir / f"{stem}_recovery.png")}


__all__ = ["plot_summary", "plot_success", "plot_recovery"]
