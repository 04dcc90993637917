"""Figures written next to the CSV reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import METRIC_NAMES  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def figsize(scale=1.0, ratio=None):
    width = 6.0 * scale
    ratio = ratio or (np.sqrt(5.0) - 1.0) / 2.0
    return width, width * ratio


def plot_history(rows, path, title=None):
    """Training/validation loss and validation Dice against optimizer step."""
    steps = [r["step"] for r in rows]
    with plt.rc_context(RC):
        fig, (ax_loss, ax_dice) = plt.subplots(1, 2, figsize=figsize(1.3, 0.4))
        ax_loss.plot(steps, [r["train_loss"] for r in rows], label="train")
        ax_loss.plot(steps, [r["val_loss"] for r in rows], label="validation")
        ax_loss.set_xlabel("step")
        ax_loss.set_ylabel("loss")
        ax_loss.set_yscale("log")
        ax_loss.legend(frameon=False)
        ax_dice.plot(steps, [r["val_dice"] for r in rows], color="C2")
        ax_dice.set_xlabel("step")
        ax_dice.set_ylabel("validation Dice")
        ax_dice.set_ylim(0, 1)
        if title:
            fig.suptitle(title)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_ablation(rows, path):
    """Grouped bars, one group per metric, one bar per configuration."""
    labels = [r["run"] for r in rows]
    width = 0.8 / max(len(rows), 1)
    x = np.arange(len(METRIC_NAMES))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(1.3, 0.45))
        for i, r in enumerate(rows):
            ax.bar(x + (i - (len(rows) - 1) / 2) * width, [r[m] for m in METRIC_NAMES],
                   width, label=labels[i])
        ax.set_xticks(x)
        ax.set_xticklabels(METRIC_NAMES)
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False, ncol=2, loc="lower left", bbox_to_anchor=(1.0, 0.0))
        fig.savefig(path)
        plt.close(fig)
    return path
