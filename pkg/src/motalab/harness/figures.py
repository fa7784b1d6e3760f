"""Summary figures for a run: per-strategy accuracy and normalised drift."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {"font.size": 8, "axes.labelsize": 9, "axes.spines.top": False, "axes.spines.right": False,
         "figure.dpi": 150, "savefig.bbox": "tight"}


def _per_strategy(rows, strategies, key):
    return [np.array([r[key] for r in rows if r["strategy"] == s], dtype=float) for s in strategies]


def _strip(ax, values, strategies, ylabel, log=False):
    pos = np.arange(len(strategies))
    for k, v in enumerate(values):
        v = v[np.isfinite(v) & ((v > 0) if log else True)]
        if v.size == 0:
            continue
        jitter = np.linspace(-0.15, 0.15, v.size) if v.size > 1 else np.zeros(1)
        ax.plot(pos[k] + jitter, v, "o", ms=3, alpha=0.6, color="0.4")
        ax.plot([pos[k] - 0.25, pos[k] + 0.25], [v.mean()] * 2, color="C0", lw=2)
    ax.set_xticks(pos)
    ax.set_xticklabels([s.replace("_", "\n") for s in strategies])
    ax.set_ylabel(ylabel)
    if log:
        ax.set_yscale("log")


def render(root: str | Path, rows: list[dict], strategies) -> list[Path]:
    """Write ``figures/accuracy.png`` and ``figures/drift.png``; returns the paths."""
    out = Path(root) / "figures"
    out.mkdir(exist_ok=True)
    paths = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 2.6))
        _strip(ax, _per_strategy(rows, strategies, "avg_acc"), strategies, "average accuracy")
        paths.append(out / "accuracy.png")
        fig.savefig(paths[-1])
        plt.close(fig)

        fig, ax = plt.subplots(figsize=(6.0, 2.6))
        _strip(ax, _per_strategy(rows, strategies, "drift_norm"), strategies, "normalised task drift", log=True)
        ax.axhline(1.0, color="0.7", lw=0.8, ls="--")
        paths.append(out / "drift.png")
        fig.savefig(paths[-1])
        plt.close(fig)
    return paths
