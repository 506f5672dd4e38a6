"""Evaluation metrics that need no pretrained networks.

* SSIM: single scale, 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
  K2 = 0.03, data range 1, computed over the valid window positions and
  averaged over RGB.
* Pose error: a keypoint proxy built from the part scores. Each part's
  centroid (pixels whose argmax is that part, weighted by its score) is
  compared with the matching point of the synthetic skeleton: the midpoint of
  the part's stretch of its segment's joint-to-joint axis.
* Masked L1 over the foreground.

LPIPS and FReID need pretrained networks and are reported as unsupported.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .synthworld import J, SEGMENTS

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MIN_PART_MASS = 1.0
UNSUPPORTED = "unsupported"


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(a: Tensor, b: Tensor) -> Tensor:
    """Per-channel SSIM maps over valid window positions; inputs (..., C, H, W)."""
    if a.shape != b.shape:
        raise ValueError(f"ssim needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    lead = a.shape[:-2]
    x = a.reshape(-1, 1, *a.shape[-2:]).double()
    y = b.reshape(-1, 1, *b.shape[-2:]).double()
    w = gaussian_window().to(x)[None, None]
    mu_x, mu_y = F.conv2d(x, w), F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x**2
    syy = F.conv2d(y * y, w) - mu_y**2
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    out = num / den
    return out.reshape(*lead, *out.shape[-2:])


def ssim(a: Tensor, b: Tensor) -> float:
    """Mean SSIM of two (3, H, W) images (or any matching (..., C, H, W) stack)."""
    return float(ssim_map(a, b).mean())


def ssim_per_image(a: Tensor, b: Tensor) -> list[float]:
    """SSIM for each image of a (F, C, H, W) batch."""
    return [float(v) for v in ssim_map(a, b).mean(dim=(-3, -2, -1))]


def masked_l1(pred: Tensor, target: Tensor, mask: Tensor) -> float:
    """Mean absolute error over foreground pixels and all channels (0 if no foreground)."""
    m = mask.unsqueeze(-3)
    denom = float(m.sum()) * pred.shape[-3]
    if denom == 0:
        return 0.0
    return float((m * (pred - target).abs()).sum()) / denom


# ---------------------------------------------------------------- pose proxy


def part_anchors(keypoints: np.ndarray, n_parts: int) -> np.ndarray:
    """Skeleton point (x, y) for every part, from (J, 2) keypoints."""
    kp = np.asarray(keypoints, dtype=np.float64)
    pieces = n_parts // len(SEGMENTS)
    if pieces < 1 or pieces * len(SEGMENTS) != n_parts:
        raise ValueError(f"n_parts must be a positive multiple of {len(SEGMENTS)}, got {n_parts}")
    out = np.empty((n_parts, 2))
    for s, (_, ja, jb) in enumerate(SEGMENTS):
        a, b = kp[J[ja]], kp[J[jb]]
        for i in range(pieces):
            out[s * pieces + i] = a + (b - a) * (i + 0.5) / pieces
    return out


def part_centroids(S: Tensor | np.ndarray, min_mass: float = MIN_PART_MASS) -> tuple[np.ndarray, np.ndarray]:
    """Score-weighted centroid (x, y) of each part's argmax region.

    Returns (centroids (n, 2), detected (n,) bool); undetected parts are NaN.
    """
    s = S.detach().cpu().double().numpy() if isinstance(S, Tensor) else np.asarray(S, dtype=np.float64)
    n = s.shape[0] - 1
    lab = s.argmax(axis=0)
    ys, xs = np.mgrid[: s.shape[1], : s.shape[2]]
    cents = np.full((n, 2), np.nan)
    found = np.zeros(n, bool)
    for k in range(n):
        w = np.where(lab == k, s[k], 0.0)
        mass = w.sum()
        if mass >= min_mass:
            cents[k] = ((w * xs).sum() / mass, (w * ys).sum() / mass)
            found[k] = True
    return cents, found


@dataclass
class PoseError:
    error: float  # mean pixels over detected parts; NaN if none detected
    per_part: list[float]  # NaN where missing
    missing: list[int]

    @property
    def all_detected(self) -> bool:
        return not self.missing


def pose_error(S: Tensor | np.ndarray, keypoints: np.ndarray, min_mass: float = MIN_PART_MASS) -> PoseError:
    """Mean distance (pixels) between part-score centroids and skeleton anchors."""
    cents, found = part_centroids(S, min_mass)
    anchors = part_anchors(keypoints, cents.shape[0])
    d = np.hypot(*(cents - anchors).T)
    err = float(d[found].mean()) if found.any() else math.nan
    return PoseError(error=err, per_part=[float(v) for v in d], missing=[int(k) for k in np.flatnonzero(~found)])


# ---------------------------------------------------------------- palettes


def atlas_palette(atlas: Tensor | np.ndarray) -> np.ndarray:
    """Mean colour of each part of an (n, 3, Ht, Wt) atlas."""
    a = atlas.detach().cpu().double().numpy() if isinstance(atlas, Tensor) else np.asarray(atlas, np.float64)
    return a.mean(axis=(2, 3))


def image_palette(image: Tensor, S: Tensor, min_pixels: int = 1) -> np.ndarray:
    """Mean colour of the pixels assigned (argmax) to each part; NaN rows for absent parts."""
    img = image.detach().cpu().double().numpy()
    lab = S.detach().cpu().numpy().argmax(axis=0)
    n = S.shape[0] - 1
    out = np.full((n, 3), np.nan)
    for k in range(n):
        m = lab == k
        if m.sum() >= min_pixels:
            out[k] = img[:, m].mean(axis=1)
    return out


def palette_distance(observed: np.ndarray, palette: np.ndarray) -> float:
    ok = ~np.isnan(observed).any(axis=1)
    if not ok.any():
        return math.nan
    return float(np.linalg.norm(observed[ok] - palette[ok], axis=1).mean())


# ---------------------------------------------------------------- frame selection


def source_and_held_out(n_frames: int, sources: int, pool: int, stride: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sorted source frames drawn from the first ``pool`` frames, and every
    ``stride``-th frame after the pool as held-out frames."""
    pool = min(pool, n_frames)
    if sources > pool:
        raise ValueError(f"cannot draw {sources} sources from {pool} frames")
    rng = np.random.default_rng(seed)
    src = np.sort(rng.choice(pool, sources, replace=False))
    return src, np.arange(pool, n_frames, stride)


# ---------------------------------------------------------------- reports


def _mean(values: Sequence[float]) -> float | None:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else None


@dataclass
class FrameMetrics:
    frame: int
    ssim: float | None
    masked_l1: float | None
    pose_error: float | None
    missing_parts: list[int] = field(default_factory=list)


@dataclass
class EvalReport:
    kind: str  # reconstruction | transfer
    sequence: str
    frames: list[FrameMetrics]
    config: dict[str, Any] = field(default_factory=dict)

    def aggregate(self) -> dict[str, float | None]:
        return {
            "ssim": _mean([f.ssim for f in self.frames if f.ssim is not None]),
            "masked_l1": _mean([f.masked_l1 for f in self.frames if f.masked_l1 is not None]),
            "pose_error": _mean([f.pose_error for f in self.frames if f.pose_error is not None]),
            "frames": len(self.frames),
            "frames_all_parts_detected": sum(1 for f in self.frames if not f.missing_parts),
        }

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "sequence": self.sequence,
            "aggregate": self.aggregate(),
            "lpips": UNSUPPORTED,
            "freid": UNSUPPORTED,
            "frames": [asdict(f) for f in self.frames],
            "config": self.config,
        }

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True, allow_nan=False) + "\n")
        return path

    def csv_rows(self) -> list[list[Any]]:
        rows = [["sequence", "frame", "ssim", "masked_l1", "pose_error", "missing_parts"]]
        for f in self.frames:
            rows.append([self.sequence, f.frame, f.ssim, f.masked_l1, f.pose_error, " ".join(map(str, f.missing_parts))])
        return rows


def _clean(v: float) -> float | None:
    return None if v is None or math.isnan(v) else float(v)


def reconstruction_report(
    outputs: Tensor, scores: Tensor, frames: Mapping[str, Tensor], frame_ids: Sequence[int],
    sequence: str, config: Mapping[str, Any] | None = None,
) -> EvalReport:
    """Metrics for frames rendered in their own poses against ground truth."""
    ss = ssim_per_image(outputs, frames["image"])
    rows = []
    for i, fid in enumerate(frame_ids):
        pe = pose_error(scores[i], frames["keypoints"][i].numpy())
        rows.append(FrameMetrics(
            frame=int(fid),
            ssim=ss[i],
            masked_l1=masked_l1(outputs[i], frames["image"][i], frames["mask"][i]),
            pose_error=_clean(pe.error),
            missing_parts=pe.missing,
        ))
    return EvalReport("reconstruction", sequence, rows, dict(config or {}))


def transfer_report(
    scores: Tensor, keypoints: Tensor, frame_ids: Sequence[int], sequence: str,
    config: Mapping[str, Any] | None = None,
) -> EvalReport:
    """Pose errors of a transferred sequence against the driving keypoints."""
    rows = []
    for i, fid in enumerate(frame_ids):
        pe = pose_error(scores[i], keypoints[i].numpy())
        rows.append(FrameMetrics(frame=int(fid), ssim=None, masked_l1=None,
                                 pose_error=_clean(pe.error), missing_parts=pe.missing))
    return EvalReport("transfer", sequence, rows, dict(config or {}))


def eval_reconstruction(state, frames: Mapping[str, Tensor], frame_ids: Sequence[int], sequence: str,
                        config: Mapping[str, Any] | None = None) -> tuple[EvalReport, Tensor]:
    """Render each frame from its own pose with a personalized state; returns (report, images)."""
    from .trainer import transfer

    images, scores, _ = transfer(state, frames["stickman"])
    return reconstruction_report(images, scores, frames, frame_ids, sequence, config), images


def eval_transfer(state, driving: Mapping[str, Tensor], frame_ids: Sequence[int], sequence: str,
                  config: Mapping[str, Any] | None = None) -> tuple[EvalReport, Tensor]:
    """Drive a personalized state with another sequence's stickmen; returns (report, images)."""
    from .trainer import transfer

    images, scores, _ = transfer(state, driving["stickman"])
    return transfer_report(scores, driving["keypoints"], frame_ids, sequence, config), images
