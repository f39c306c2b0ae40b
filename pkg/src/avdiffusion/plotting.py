"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .formats import mask_to_rgb  # noqa: E402

ARM_COLORS = {"simple": "#7f7f7f", "vessel": "#c0392b"}

_STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "lines.linewidth": 1.5,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # no version/date metadata, so reruns give identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_history(histories: Mapping[str, Sequence[float]], path, title: str = "Training loss") -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for label, h in histories.items():
            ax.plot(np.arange(1, len(h) + 1), h, label=label, color=ARM_COLORS.get(label))
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        ax.set_yscale("log")
        ax.set_title(title)
        if len(histories) > 1:
            ax.legend()
        return _save(fig, path)


def plot_mask_grid(masks, path, ncols: int = 8, title: str | None = None) -> Path:
    n = max(len(masks), 1)
    ncols = min(ncols, n)
    nrows = math.ceil(n / ncols)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(1.1 * ncols, 1.1 * nrows + (0.3 if title else 0)), squeeze=False)
        for ax in axes.ravel():
            ax.axis("off")
        for ax, m in zip(axes.ravel(), masks):
            ax.imshow(mask_to_rgb(m), interpolation="nearest")
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def plot_comparison(summary: Mapping, path) -> Path:
    """Bar charts of empty-sample rate and foreground fraction per loss arm."""
    arms = list(summary["arms"])
    empty = [summary["arms"][a]["empty_sample_rate"] for a in arms]
    frac = [summary["arms"][a]["mean_foreground_fraction"] for a in arms]
    colors = [ARM_COLORS.get(a, "C0") for a in arms]
    with plt.rc_context(_STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(6.5, 3))
        ax1.bar(arms, empty, color=colors)
        ax1.set_ylim(0, 1)
        ax1.set_ylabel("empty-sample rate")
        ax2.bar(arms, frac, color=colors)
        ref = summary.get("training_mean_foreground_fraction")
        if ref is not None:
            ax2.axhline(ref, color="k", ls="--", lw=1, label="training set")
            ax2.axhspan(ref / 2, ref * 2, color="k", alpha=0.06)
            ax2.legend()
        ax2.set_ylabel("mean foreground fraction")
        return _save(fig, path)


def plot_metrics_summary(rows: Sequence[Mapping], path) -> Path:
    """Histograms of foreground fraction and per-mask branch points."""
    frac = [r["foreground_fraction"] for r in rows]
    branches = [r["artery"]["branch_point_count"] + r["vein"]["branch_point_count"] for r in rows]
    loops = [r["artery"]["loop_count"] + r["vein"]["loop_count"] for r in rows]
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(8, 2.8))
        for ax, data, label in zip(axes, (frac, branches, loops), ("foreground fraction", "branch points", "loops")):
            ax.hist(data, bins=min(20, max(len(set(data)), 1)), color="#34495e")
            ax.set_xlabel(label)
        axes[0].set_ylabel("masks")
        return _save(fig, path)
