"""Matplotlib rendering helpers for the report paths.

Every function writes a PNG next to the delimited outputs and returns the
path. The Agg backend is forced so the CLI works headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .vision import BoundingBox, Cam

_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def loss_curve(losses, path, title: str = "training loss") -> str:
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(1, losses.size + 1), losses, lw=1.0, color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return str(path)


def concreteness_curve(buckets: dict[int, float], path) -> str:
    """Pearson correlation as a function of the minimum-frequency bucket."""
    keys = sorted(buckets)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(keys, [buckets[k] for k in keys], marker="o", color="tab:green")
    ax.set_xscale("log")
    ax.set_xticks(keys)
    ax.set_xticklabels([str(k) for k in keys])
    ax.set_xlabel("minimum word frequency")
    ax.set_ylabel("pearson r")
    ax.set_ylim(-1.05, 1.05)
    ax.axhline(0.0, color="gray", lw=0.8)
    ax.set_title("concreteness vs gold ratings")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return str(path)


def prf_bars(metrics: dict[str, float], path, title: str) -> str:
    names = ["precision", "recall", "f1"]
    values = [metrics.get(n, 0.0) for n in names]
    fig, ax = plt.subplots(figsize=(5, 4))
    bars = ax.bar(names, values, color=["tab:blue", "tab:orange", "tab:green"])
    for bar, value in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, value + 0.01, f"{value:.3f}", ha="center", fontsize=9)
    ax.set_ylim(0, 1.1)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return str(path)


def association_bars(values: dict[str, float], path, title: str = "mean association strength") -> str:
    names = list(values)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(names, [values[n] for n in names], color="tab:purple")
    ax.set_ylabel("strength")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return str(path)


def cluster_size_bars(sizes, path, title: str = "induced cluster sizes") -> str:
    """Bar chart of words per induced cluster, largest first."""
    sizes = list(sizes)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(np.arange(len(sizes)), sizes, color="tab:blue")
    ax.set_xlabel("cluster rank")
    ax.set_ylabel("words")
    ax.set_yticks(range(0, max(sizes, default=1) + 1))
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return str(path)


def cam_overlay(image: np.ndarray, cam: Cam, path, box: BoundingBox | None = None) -> str:
    """Image with the upsampled heatmap alpha-blended on top; optional box."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"cam_overlay: expected a (3,H,W) image, got {image.shape}")
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.transpose(image, (1, 2, 0)))
    heat = cam.upsampled
    span = heat.max() - heat.min()
    if span > 0:
        heat = (heat - heat.min()) / span
    ax.imshow(heat, cmap="inferno", alpha=0.45, vmin=0.0, vmax=1.0)
    if box is not None:
        from matplotlib.patches import Rectangle

        ax.add_patch(
            Rectangle(
                (box.x_min - 0.5, box.y_min - 0.5),
                box.x_max - box.x_min,
                box.y_max - box.y_min,
                fill=False,
                edgecolor="cyan",
                lw=1.5,
            )
        )
    ax.set_title(f"cluster {cam.cluster}")
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return str(path)
