"""Figures written next to the delimited reports: triptychs, loss curves, ablation bars."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    # byte-stable PNGs across runs
    "svg.hashsalt": "hvqtrans",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def triptych(image: np.ndarray, mask: np.ndarray | None, score: np.ndarray, path, title: str = "", vmax: float | None = None) -> Path:
    """Input image, ground-truth mask and anomaly score map side by side."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.7))
        axes[0].imshow(np.clip(image, 0, 1))
        axes[0].set_title("input")
        axes[1].imshow(np.zeros(image.shape[:2]) if mask is None else mask, cmap="gray", vmin=0, vmax=1)
        axes[1].set_title("ground truth")
        im = axes[2].imshow(score, cmap="jet", vmin=0, vmax=vmax)
        axes[2].set_title("score map")
        fig.colorbar(im, ax=axes[2], fraction=0.046, pad=0.04)
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def loss_curves(history: Sequence[dict], path) -> Path:
    terms = ("total", "recon", "proto", "commit", "pot", "ce")
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, (ax, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        for t in terms:
            ax.plot(epochs, [r[t] for r in history], label=t)
        ax.set_yscale("symlog", linthresh=1e-2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(ncol=2)
        if history and history[0].get("perplexity"):
            per = np.array([r["perplexity"] for r in history])
            for l in range(per.shape[1]):
                ax2.plot(epochs, per[:, l], label=f"level {l + 1}")
            ax2.legend()
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("codebook perplexity")
        return _save(fig, path)


def ablation_bars(rows: Sequence[dict], path, title: str = "") -> Path:
    names = [r["name"] for r in rows]
    det = [np.nan if r.get("image_auroc") is None else r["image_auroc"] for r in rows]
    loc = [np.nan if r.get("pixel_auroc") is None else r["pixel_auroc"] for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(rows)), 3))
        ax.bar(x - 0.2, det, 0.4, label="detection")
        ax.bar(x + 0.2, loc, 0.4, label="localization")
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylim(0.4, 1.0)
        ax.set_ylabel("AUROC")
        ax.legend(loc="lower right")
        if title:
            ax.set_title(title)
        return _save(fig, path)
