"""Figures for the ``report`` command, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .evaluation import MetricsReport

# PNG text chunks would otherwise embed the matplotlib version
_META = {"Software": None}


def _save(fig: Figure, path) -> Path:
    FigureCanvasAgg(fig)
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_META)
    return path


def plot_confusion(report: MetricsReport, path, title: str = "") -> Path:
    """Row-normalized confusion heatmap (rows are ground truth)."""
    conf = np.asarray(report.confusion, dtype=np.float64)
    rows = conf.sum(axis=1, keepdims=True)
    frac = np.divide(conf, rows, out=np.zeros_like(conf), where=rows > 0)
    labels = [str(c) for c in report.classes]
    fig = Figure(figsize=(4.2, 3.6))
    ax = fig.add_subplot()
    im = ax.imshow(frac, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    for (i, j), v in np.ndenumerate(frac):
        if v >= 0.05:
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=6,
                    color="black" if v > 0.6 else "white")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    ax.set_title(title or f"step {report.step_index}", fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def plot_scores(rows: Sequence[dict], path, title: str = "") -> Path:
    """Grouped bars of base mIoU, novel mIoU and HM, one group per row label."""
    names = [r["label"] for r in rows]
    keys = (("miou_base", "base"), ("miou_novel", "novel"), ("hm", "HM"))
    x = np.arange(len(rows))
    width = 0.26
    fig = Figure(figsize=(max(4.0, 1.2 * len(rows) + 1.5), 3.2))
    ax = fig.add_subplot()
    for i, (key, label) in enumerate(keys):
        ax.bar(x + (i - 1) * width, [100.0 * r[key] for r in rows], width, label=label)
    ax.set_xticks(x, names, rotation=20, ha="right", fontsize=7)
    ax.set_ylabel("mIoU (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7, frameon=False)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)
