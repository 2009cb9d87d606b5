"""Figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402
import numpy as np  # noqa: E402

from dkspace.metrics import ConfusionMatrix  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_sweep(curves: Mapping[str, Sequence[tuple[float, float]]], path: str | Path, title: str = "") -> Path:
    """Accuracy against label threshold, one line per scale."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        for name, pts in curves.items():
            v, acc = zip(*pts) if pts else ((), ())
            label = "all scales" if name == "all" else f"s = {name}"
            ax.plot(v, acc, marker="o", ms=3, lw=1.2, label=label, ls="--" if name == "all" else "-")
        ax.set_xlabel("label threshold v")
        ax.set_ylabel("accuracy")
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlim(0, 1)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_confusion(cm: ConfusionMatrix, path: str | Path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        n = len(cm.labels)
        fig, ax = plt.subplots(figsize=(1.0 + 0.8 * n, 0.8 + 0.8 * n))
        ax.imshow(cm.counts, cmap="Blues", vmin=0)
        ax.set_xticks(range(n), cm.labels)
        ax.set_yticks(range(n), cm.labels)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        hi = cm.counts.max() if cm.counts.size else 0
        for i in range(n):
            for j in range(n):
                v = cm.counts[i, j]
                ax.text(j, i, str(v), ha="center", va="center", color="white" if v > hi / 2 else "black")
        ax.spines[:].set_visible(False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_losses(histories: Mapping[int, Sequence[float]], path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        for s, h in histories.items():
            ax.plot(np.arange(1, len(h) + 1), h, lw=1.2, label=f"s = {s}")
        ax.set_xlabel("epoch")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_ylabel("mean BCE")
        if all(min(h) > 0 for h in histories.values() if len(h)):
            ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)
