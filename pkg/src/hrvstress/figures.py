"""Static matplotlib renderings of run artifacts.

Three figures per model run: validation-loss curves per fold, the 2D latent
maps with cluster colors and test-window overlays, and the four-marker
cluster comparison with error bars and p-values.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .cluster import NOISE  # noqa: E402
from .features import MARKER_NAMES  # noqa: E402

CLUSTER_COLORS = {0: "tab:blue", 1: "tab:orange"}

plt.rcParams.update({
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})


def plot_loss_curves(path, fold_results) -> None:
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    for fr in fold_results:
        if fr.val_curve:
            ax.plot(range(1, len(fr.val_curve) + 1), fr.val_curve,
                    label=f"fold {fr.fold_index}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation loss")
    ax.set_title("Validation loss per fold")
    if fold_results and fold_results[0].val_curve:
        ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_latents(path, fold_results, labels, test_latents_by_fold, test_idx) -> None:
    """One panel per fold: validation latents colored by cluster, noise as
    gray crosses, test windows as small black points."""
    n = len(fold_results)
    cols = min(n, 3)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3.4 * cols, 3.0 * rows), squeeze=False)
    for ax in axes.flat[n:]:
        ax.set_visible(False)
    for fr, ax in zip(fold_results, axes.flat):
        fold_labels = np.asarray(labels)[fr.val_indices]
        for c, color in CLUSTER_COLORS.items():
            pts = fr.latents[fold_labels == c]
            if pts.size:
                ax.scatter(pts[:, 0], pts[:, 1], s=8, c=color, label=f"cluster {c}")
        noise_pts = fr.latents[fold_labels == NOISE]
        if noise_pts.size:
            ax.scatter(noise_pts[:, 0], noise_pts[:, 1], s=14, c="0.6", marker="x",
                       label="noise")
        z_test = test_latents_by_fold[fr.fold_index]
        if len(test_idx):
            ax.scatter(z_test[:, 0], z_test[:, 1], s=4, c="black", alpha=0.6,
                       label="test")
        ax.set_title(f"fold {fr.fold_index}")
        ax.set_xlabel("z1")
        ax.set_ylabel("z2")
    axes.flat[0].legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_marker_comparison(path, report) -> None:
    """Bar chart per marker: cluster means with standard-deviation error bars
    and the two-sided p-value printed above."""
    fig, axes = plt.subplots(2, 2, figsize=(7.0, 5.6))
    for marker, ax in zip(MARKER_NAMES, axes.flat):
        stats = report.stats[marker]
        means = [stats[0].mean, stats[1].mean]
        sds = [0.0 if math.isnan(stats[c].sd) else stats[c].sd for c in (0, 1)]
        bars = ax.bar(
            ["cluster 0", "cluster 1"], means, yerr=sds, capsize=4,
            color=[CLUSTER_COLORS[0], CLUSTER_COLORS[1]], width=0.6,
        )
        for bar, c in zip(bars, (0, 1)):
            tag = report.assignment.get(c, "")
            if tag and tag != "undetermined":
                ax.text(bar.get_x() + bar.get_width() / 2, 0, tag,
                        ha="center", va="bottom", fontsize=7, color="white")
        test = report.tests.get(marker)
        subtitle = f"p = {test.p:.2e}" if test else "test unavailable"
        ax.set_title(f"{marker}  ({subtitle})")
    fig.suptitle("Marker comparison across clusters", y=0.99)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
