"""Matplotlib renderings of run artifacts: training curves, rank histogram,
ablation bars. File output only; no interactive backend required."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

# pinned so repeated renders of the same data are byte-identical
_PNG_META = {"Software": "tiedrank"}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_training_curves(history: list, path) -> None:
    """Two panels: train loss on top, validation retrieval metrics plus the
    learning-rate staircase below."""
    epochs = [row.epoch for row in history]
    fig, (ax_loss, ax_val) = plt.subplots(2, 1, figsize=(7.5, 6.5), sharex=True)
    ax_loss.plot(epochs, [row.train_loss for row in history], color="tab:red", lw=1.5)
    ax_loss.set_ylabel("train loss")
    ax_loss.grid(alpha=0.3)

    ax_val.plot(epochs, [row.val_map10 for row in history], color="tab:blue",
                lw=1.8, label="mAP@10")
    ax_val.plot(epochs, [row.val_r1 for row in history], color="tab:gray",
                lw=1.0, alpha=0.7, label="R@1")
    ax_val.plot(epochs, [row.val_r10 for row in history], color="tab:green",
                lw=1.0, alpha=0.7, label="R@10")
    ax_val.set_ylabel("validation")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylim(-0.02, 1.02)
    ax_val.grid(alpha=0.3)

    ax_lr = ax_val.twinx()
    ax_lr.step(epochs, [row.lr for row in history], where="post",
               color="tab:orange", lw=1.0, alpha=0.8, label="lr")
    ax_lr.set_yscale("log")
    ax_lr.set_ylabel("learning rate")

    handles, labels = ax_val.get_legend_handles_labels()
    h2, l2 = ax_lr.get_legend_handles_labels()
    ax_val.legend(handles + h2, labels + l2, loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_rank_histogram(report, path) -> None:
    """Counts of the paired item's rank: bars for 1..10 plus an overflow
    bucket, with the retrieval summary in the title."""
    ranks = np.array([rank for _, rank in report.per_query])
    buckets = [int(np.sum(ranks == r)) for r in range(1, 11)]
    buckets.append(int(np.sum(ranks > 10)))
    labels = [str(r) for r in range(1, 11)] + [">10"]
    fig, ax = plt.subplots(figsize=(7, 4))
    colors = ["tab:blue"] * 10 + ["tab:gray"]
    ax.bar(range(len(buckets)), buckets, color=colors)
    ax.set_xticks(range(len(buckets)))
    ax.set_xticklabels(labels)
    ax.set_xlabel("rank of paired audio")
    ax.set_ylabel("queries")
    ax.set_title(f"mAP@10 {report.map10:.3f}   R@1 {report.r1:.3f}   "
                 f"R@5 {report.r5:.3f}   R@10 {report.r10:.3f}")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_ablation(rows: list, path) -> None:
    """Grouped bars, one cluster per grid cell, one bar per metric."""
    from .train import cell_label

    labels = [cell_label(cell) for cell, _ in rows]
    metrics = [("mAP@10", [rep.map10 for _, rep in rows], "tab:blue"),
               ("R@1", [rep.r1 for _, rep in rows], "tab:gray"),
               ("R@5", [rep.r5 for _, rep in rows], "tab:green"),
               ("R@10", [rep.r10 for _, rep in rows], "tab:orange")]
    x = np.arange(len(labels))
    width = 0.2
    fig, ax = plt.subplots(figsize=(max(7.0, 1.8 * len(labels)), 4.5))
    for k, (name, values, color) in enumerate(metrics):
        ax.bar(x + (k - 1.5) * width, values, width, label=name, color=color)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
