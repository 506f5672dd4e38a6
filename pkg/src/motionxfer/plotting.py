"""Report figures (matplotlib, written straight to files)."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from torch import Tensor  # noqa: E402

from .evalkit import EvalReport  # noqa: E402


def _hwc(img: Tensor | np.ndarray) -> np.ndarray:
    a = img.detach().cpu().numpy() if isinstance(img, Tensor) else np.asarray(img)
    return np.clip(np.transpose(a, (1, 2, 0)), 0.0, 1.0)


def stickman_image(stickman: Tensor | np.ndarray) -> np.ndarray:
    """Collapse the bone channels into one grey image."""
    a = stickman.detach().cpu().numpy() if isinstance(stickman, Tensor) else np.asarray(stickman)
    return np.clip(a.max(axis=0), 0.0, 1.0)


def contact_sheet(
    path: str | Path,
    sources: Sequence[Tensor],
    poses: Sequence[Tensor],
    outputs: Sequence[Tensor],
    truths: Sequence[Tensor] | None = None,
    title: str | None = None,
) -> Path:
    """One row per frame: source | target pose | output | ground truth (if given)."""
    rows = len(outputs)
    cols = 4 if truths is not None else 3
    fig, axes = plt.subplots(rows, cols, figsize=(1.8 * cols, 1.8 * max(rows, 1)), squeeze=False)
    heads = ["source", "target pose", "output", "ground truth"][:cols]
    for r in range(rows):
        panels = [_hwc(sources[r % len(sources)]), stickman_image(poses[r]), _hwc(outputs[r])]
        if truths is not None:
            panels.append(_hwc(truths[r]))
        for c, img in enumerate(panels):
            ax = axes[r][c]
            ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(heads[c], fontsize=8)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def read_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def training_curves(log_path: str | Path, path: str | Path) -> Path:
    """Per-epoch training losses and validation metrics, one panel per stage plus validation."""
    records = read_log(log_path)
    stages = [s for s in ("init", "multivideo") if any(r["stage"] == s for r in records)]
    fig, axes = plt.subplots(1, len(stages) + 1, figsize=(4.2 * (len(stages) + 1), 3.2), squeeze=False)
    for ax, stage in zip(axes[0], stages):
        recs = [r for r in records if r["stage"] == stage]
        keys = [k for k in recs[0] if k not in ("stage", "epoch", "step", "lr", "wall") and not k.startswith("val_")]
        for k in keys:
            ax.plot([r["epoch"] for r in recs], [r[k] for r in recs], marker="o", label=k)
        ax.set_title(f"{stage} losses")
        ax.set_xlabel("epoch")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
    ax = axes[0][-1]
    x = np.arange(1, len(records) + 1)
    for k in sorted({k for r in records for k in r if k.startswith("val_")}):
        ax.plot(x, [r.get(k, np.nan) for r in records], marker="o", label=k[4:])
    ax.set_title("validation (all epochs)")
    ax.set_xlabel("epoch (cumulative)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def metric_plot(reports: Sequence[EvalReport], path: str | Path) -> Path:
    """Per-frame SSIM and pose error for each evaluated sequence."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.2))
    for rep in reports:
        frames = [f.frame for f in rep.frames]
        if any(f.ssim is not None for f in rep.frames):
            a1.plot(frames, [np.nan if f.ssim is None else f.ssim for f in rep.frames], marker=".", label=rep.sequence)
        a2.plot(frames, [np.nan if f.pose_error is None else f.pose_error for f in rep.frames], marker=".",
                label=f"{rep.sequence} ({rep.kind})")
    a1.set_title("SSIM")
    a1.set_xlabel("frame")
    a2.set_title("pose error (px)")
    a2.set_xlabel("frame")
    for ax in (a1, a2):
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def atlas_figure(atlas: Tensor, path: str | Path, title: str | None = None) -> Path:
    """The n part textures side by side."""
    n = atlas.shape[0]
    fig, axes = plt.subplots(1, n, figsize=(1.2 * n, 1.5), squeeze=False)
    for k in range(n):
        axes[0][k].imshow(_hwc(atlas[k]), interpolation="nearest")
        axes[0][k].set_xticks([])
        axes[0][k].set_yticks([])
        axes[0][k].set_title(str(k), fontsize=7)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


__all__ = ["contact_sheet", "training_curves", "metric_plot", "atlas_figure", "stickman_image", "read_log"]
