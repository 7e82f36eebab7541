"""Figure rendering for training and evaluation reports.

Figures are written to files (Agg backend, no display) alongside the CSV/JSON
outputs: a kappa-vs-epoch curve from the training history and a confusion
matrix heatmap from an evaluation.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import ConfusionMatrix


def save_history_plot(history, path) -> None:
    """Training and validation kappa per epoch, training loss on a twin axis."""
    epochs = [rec.epoch for rec in history]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(epochs, [rec.train_kappa for rec in history], "o-", color="tab:blue", label="train kappa")
    if any(np.isfinite(rec.val_kappa) for rec in history):
        ax.plot(epochs, [rec.val_kappa for rec in history], "s-", color="tab:orange", label="validation kappa")
    ax.set_xlabel("epoch")
    ax.set_ylabel("quadratic weighted kappa")
    ax.set_ylim(-0.05, 1.05)
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(epochs, [rec.train_loss for rec in history], "--", color="tab:gray", label="train loss")
    ax2.set_ylabel("loss")
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_confusion_plot(cm: ConfusionMatrix, path) -> None:
    """Confusion heatmap with per-cell counts; rows true, columns predicted."""
    counts = cm.counts
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    im = ax.imshow(counts, cmap="Blues")
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            color = "white" if counts[i, j] > counts.max() / 2 else "black"
            ax.text(j, i, str(int(counts[i, j])), ha="center", va="center", color=color, fontsize=9)
    ax.set_xlabel("predicted grade")
    ax.set_ylabel("true grade")
    ax.set_xticks(range(5))
    ax.set_yticks(range(5))
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
