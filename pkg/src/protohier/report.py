"""Figure rendering for the CSV outputs the command line writes.

Every figure lands next to its delimited file so a run directory is
self-describing. Rendering uses the Agg backend and never opens a window.
"""

from __future__ import annotations

import os
import tempfile

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _save_atomic(fig, path):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".png", dir=directory)
    os.close(fd)
    try:
        fig.savefig(tmp, dpi=120)
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)


def plot_training_curves(rows, path, stage_boundary=None):
    """Loss curves per epoch from trainer metrics rows."""
    epochs = [row["epoch"] for row in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [row["img_loss"] for row in rows], label="image loss")
    ax.plot(epochs, [row["spd_loss"] for row in rows], label="path loss")
    ax.plot(epochs, [row["total"] for row in rows], label="total", linestyle="--")
    if stage_boundary is not None and 0 < stage_boundary < len(rows):
        ax.axvline(stage_boundary + 0.5, color="gray", linewidth=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    _save_atomic(fig, path)


def plot_ablation(rows, path):
    """Grouped bars for the sweep comparison: one bar per configuration."""
    labels = [f"{row['structure']}/neg{row['n_neg']}" for row in rows]
    fig, ax = plt.subplots(figsize=(max(7, 1.2 * len(rows)), 4.5))
    x = range(len(rows))
    ax.bar(x, [row["knn_accuracy"] for row in rows], width=0.55, label="knn accuracy")
    ax.plot(x, [row["nmi"] for row in rows], "o-", color="darkorange", label="nmi")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    _save_atomic(fig, path)
