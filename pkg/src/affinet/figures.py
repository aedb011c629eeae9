"""Matplotlib renderings of run metrics and filter reports.

All functions write PNG files next to the delimited outputs; nothing here is
needed by the training path itself.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150

plt.rcParams.update({
    "figure.autolayout": True,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})


def plot_training_curves(rows, eval_history, out_path):
    """Loss/penalty and accuracy panels from logged rows."""
    iters = [r.iteration for r in rows]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.2))

    ax_loss.plot(iters, [r.ce for r in rows], label="cross-entropy", color="tab:blue")
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("cross-entropy")
    r2 = np.array([r.r2 for r in rows])
    if (r2 > 0).any():
        ax_r2 = ax_loss.twinx()
        ax_r2.plot(iters, r2, label="ring penalty", color="tab:red", alpha=0.7)
        ax_r2.set_yscale("log")
        ax_r2.set_ylabel("ring penalty")
        ax_r2.grid(False)
    ax_loss.set_title("loss terms")

    ax_acc.plot(iters, [r.train_acc for r in rows], label="train (running)")
    if eval_history:
        ax_acc.plot(*zip(*eval_history), marker="o", ms=3, label="eval")
    ax_acc.set_xlabel("iteration")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend(loc="lower right")
    ax_acc.set_title("accuracy")

    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)


def plot_filter_report(report, out_path):
    """Per-layer ring variance under both patterns, log scale."""
    rows = report["rows"]
    idx = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(6, 0.28 * len(rows)), 3.4))
    ax.bar(idx - 0.2, [max(r["floor"], 1e-16) for r in rows], 0.4, label="floor pattern")
    ax.bar(idx + 0.2, [max(r["ceil"], 1e-16) for r in rows], 0.4, label="ceil pattern")
    ax.set_yscale("log")
    ax.set_xticks(idx)
    ax.set_xticklabels([r["layer"] for r in rows], rotation=90, fontsize=6)
    ax.set_ylabel("mean ring variance")
    ax.axhline(report["overall_floor"], color="tab:blue", ls="--", lw=0.8,
               label=f"overall floor = {report['overall_floor']:.2e}")
    ax.legend(fontsize=7)
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)


def plot_filter_grid(net, out_path, max_filters=32):
    """First-layer 3x3 kernels as heatmaps (circular structure is visible)."""
    w = net.blocks[0].conv_layers()[0].w.data
    kernels = w.reshape(-1, 3, 3)[:max_filters]
    cols = 8
    n = len(kernels)
    grid_rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(grid_rows, cols, figsize=(cols, grid_rows + 0.4))
    lim = np.abs(kernels).max() or 1.0
    for i, ax in enumerate(np.atleast_1d(axes).ravel()):
        ax.axis("off")
        if i < n:
            ax.imshow(kernels[i], cmap="RdBu_r", vmin=-lim, vmax=lim)
    fig.suptitle("first-layer filters", fontsize=9)
    fig.savefig(out_path, dpi=DPI)
    plt.close(fig)
