"""Figures for the report path: attention maps, reconstructions, histograms, embeddings, curves.

Everything renders off-screen with the Agg backend and writes PNG files.
Reconstruction triptychs are assembled directly with PIL so their pixels are
exactly the arrays they show.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .evalkit import FeatureStats, Reconstruction  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.interpolation": "nearest",
}

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_triptych(recon: Reconstruction, index: int, path: str | Path, gap: int = 2) -> Path:
    """masked | reconstruction | ground truth, side by side, as an RGB PNG."""
    panels = [recon.masked[index], recon.composite[index], recon.target[index]]
    h, w = panels[0].shape[:2]
    canvas = np.full((h, 3 * w + 2 * gap, 3), 255, dtype=np.uint8)
    for k, panel in enumerate(panels):
        canvas[:, k * (w + gap) : k * (w + gap) + w] = _to_uint8(panel)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path)
    return path


def plot_reconstructions(recon: Reconstruction, path: str | Path, max_rows: int = 4) -> Path:
    rows = min(max_rows, len(recon.target))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, 4, figsize=(6.4, 1.7 * rows), squeeze=False)
        titles = ("masked", "reconstruction", "ground truth", "squared error")
        for r in range(rows):
            err = recon.error[r].mean(axis=-1)
            for c, img in enumerate((recon.masked[r], recon.composite[r], recon.target[r])):
                axes[r, c].imshow(np.clip(img, 0, 1))
            axes[r, 3].imshow(err, cmap="magma", vmin=0.0, vmax=max(float(err.max()), 1e-6))
            for c in range(4):
                axes[r, c].set_xticks([])
                axes[r, c].set_yticks([])
                if r == 0:
                    axes[r, c].set_title(titles[c])
        fig.suptitle(f"masked-region MSE {recon.mse:.4f}")
        return _save(fig, path)


def plot_attention_maps(images: np.ndarray, maps: np.ndarray, path: str | Path, max_rows: int = 4) -> Path:
    """``images`` (B, H, W, 3); ``maps`` (B, heads, g, g) cls-to-patch attention."""
    rows = min(max_rows, len(images))
    heads = maps.shape[1]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, heads + 1, figsize=(1.5 * (heads + 1), 1.5 * rows), squeeze=False)
        for r in range(rows):
            axes[r, 0].imshow(np.clip(images[r], 0, 1))
            for h in range(heads):
                axes[r, h + 1].imshow(maps[r, h], cmap="inferno")
                if r == 0:
                    axes[r, h + 1].set_title(f"head {h}")
            for ax in axes[r]:
                ax.set_xticks([])
                ax.set_yticks([])
        axes[0, 0].set_title("input")
        return _save(fig, path)


def plot_feature_histograms(stats: Mapping[str, FeatureStats], path: str | Path) -> Path:
    """(a) per-image |student - teacher| differences, (b) pooled feature values, one curve per run."""
    with plt.rc_context(STYLE):
        fig, (ax_a, ax_b) = plt.subplots(1, 2, figsize=(7.0, 2.6))
        for k, (name, st) in enumerate(stats.items()):
            color = PALETTE[k % len(PALETTE)]
            for ax, edges, counts in (
                (ax_a, st.diff_edges, st.diff_counts),
                (ax_b, st.value_edges, st.value_counts),
            ):
                frac = counts / max(counts.sum(), 1)
                ax.stairs(frac, edges, color=color, label=name, fill=False, linewidth=1.2)
        ax_a.set_xlabel("mean |student - teacher| per image")
        ax_b.set_xlabel("feature value")
        for ax in (ax_a, ax_b):
            ax.set_ylabel("fraction")
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_embedding(coords: Mapping[str, np.ndarray], labels: np.ndarray | None, path: str | Path) -> Path:
    panels = list(coords.items())
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 2.8), squeeze=False)
        for ax, (name, xy) in zip(axes[0], panels):
            if labels is None:
                ax.scatter(xy[:, 0], xy[:, 1], s=4, color=PALETTE[0])
            else:
                for c in np.unique(labels):
                    sel = labels == c
                    ax.scatter(xy[sel, 0], xy[sel, 1], s=4, color=PALETTE[int(c) % len(PALETTE)], label=str(c))
                ax.legend(frameon=False, markerscale=2, title="class")
            ax.set_title(name)
            ax.set_xlabel("PC 1")
            ax.set_ylabel("PC 2")
        return _save(fig, path)


def plot_ablation(labels: Sequence[str], values: Sequence[float], path: str | Path, title: str = "") -> Path:
    """Horizontal bars of probe OA per configuration row; missing values are skipped."""
    pairs = [(lab, v) for lab, v in zip(labels, values) if v is not None and np.isfinite(v)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 0.45 * max(len(pairs), 1) + 0.8))
        y = np.arange(len(pairs))
        ax.barh(y, [v for _, v in pairs], color=PALETTE[0])
        ax.set_yticks(y, [lab for lab, _ in pairs])
        ax.invert_yaxis()
        for yi, (_, v) in zip(y, pairs):
            ax.text(v, yi, f" {v:.1f}", va="center")
        ax.set_xlabel("linear-probe OA (%)")
        ax.set_xlim(0, 105)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_training_curves(records: Sequence[Mapping[str, float]], path: str | Path, log_k: float | None = None) -> Path:
    """Losses, teacher entropy and the schedules against the step counter."""
    steps = np.array([r["step"] for r in records])

    def col(name):
        return np.array([r[name] for r in records], dtype=float)

    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(7.0, 4.6), sharex=True)
        axes[0, 0].plot(steps, col("l_cls"), lw=0.8, color=PALETTE[0], label="l_cls")
        axes[0, 0].plot(steps, col("l_mse"), lw=0.8, color=PALETTE[1], label="l_mse")
        axes[0, 0].set_ylabel("loss")
        axes[0, 0].legend(frameon=False)
        axes[0, 1].plot(steps, col("teacher_entropy"), lw=0.8, color=PALETTE[2])
        if log_k is not None:
            axes[0, 1].axhline(0.5 * log_k, ls="--", lw=0.8, color="k", label="0.5 ln K")
            axes[0, 1].legend(frameon=False)
        axes[0, 1].set_ylabel("teacher entropy")
        axes[1, 0].plot(steps, col("lr"), lw=0.8, color=PALETTE[3])
        axes[1, 0].set_ylabel("lr")
        axes[1, 1].plot(steps, col("ema_m"), lw=0.8, color=PALETTE[4], label="ema_m")
        axes[1, 1].plot(steps, col("wd"), lw=0.8, color=PALETTE[5], label="wd")
        axes[1, 1].plot(steps, col("tpt_t"), lw=0.8, color=PALETTE[6], label="tpt_t")
        axes[1, 1].legend(frameon=False)
        for ax in axes[1]:
            ax.set_xlabel("step")
        return _save(fig, path)
