"""Training objectives.

All L1 terms are means over the elements they cover, so the default weights do
not depend on resolution. Cross-entropies clamp probabilities to
[1e-6, 1 - 1e-6].

Tensors are batched: images (B, 3, H, W), UV maps (B, 2n, H, W), scores
(B, n+1, H, W) with the background last, atlases (n, 3, Ht, Wt) or batched.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .netblocks import Conv, ConvSpec

PROB_EPS = 1e-6
LOG_EPS = math.log(PROB_EPS)


class LossError(FloatingPointError):
    """A loss term evaluated to NaN or infinity."""


@dataclass(frozen=True)
class LossWeights:
    image: float = 1.0
    mask: float = 1.0
    reg_texture: float = 1.0
    reg_coord: float = 20.0
    reg_mask: float = 0.8

    def __post_init__(self) -> None:
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative, got {v}")

    def without_regularizers(self) -> "LossWeights":
        return LossWeights(image=self.image, mask=self.mask, reg_texture=0.0, reg_coord=0.0, reg_mask=0.0)


TERM_WEIGHT = {
    "image": "image",
    "image_full": "image",
    "mask": "mask",
    "reg_texture": "reg_texture",
    "reg_coord": "reg_coord",
    "reg_mask": "reg_mask",
}


@dataclass
class LossReport:
    terms: dict[str, Tensor]
    weights: dict[str, float]
    total: Tensor

    def values(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


class FeatureExtractor(nn.Module):
    """Frozen random conv pyramid used as the perceptual feature space.

    Each level is a stride-2 3x3 conv followed by relu; weights come from a
    fixed seed and never receive gradients.
    """

    def __init__(self, channels: Sequence[int] = (8, 16, 32, 64), seed: int = 7,
                 level_weights: Sequence[float] | None = None) -> None:
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        ins = (3, *channels[:-1])
        self.levels = nn.ModuleList(Conv(ConvSpec(i, o, 3, 2), gen) for i, o in zip(ins, channels))
        self.level_weights = tuple(level_weights) if level_weights is not None else (1.0,) * len(channels)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for conv in self.levels:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


def _finite(name: str, value: Tensor) -> Tensor:
    if not torch.isfinite(value).all():
        raise LossError(f"loss term {name!r} is not finite ({float(value.detach())})")
    return value


def _ce_nll(logp: Tensor, target: Tensor) -> Tensor:
    """-log p[target] per pixel from log-probabilities (B, K, H, W)."""
    return -logp.clamp_min(LOG_EPS).gather(1, target.unsqueeze(1)).squeeze(1)


def loss_init_geometry(C: Tensor, S_logits: Tensor, C_gt: Tensor, S_gt: Tensor) -> tuple[Tensor, Tensor]:
    """UV L1 on each ground-truth part, and pixelwise cross-entropy of the scores.

    L_C is normalized by the number of masked UV elements (2 per assigned
    pixel); L_S is the mean over pixels against ``argmax(S_gt)``.
    """
    n = S_gt.shape[1] - 1
    w = S_gt[:, :n].repeat_interleave(2, dim=1)
    denom = w.sum().clamp_min(1.0)
    L_C = (w * (C - C_gt).abs()).sum() / denom
    logp = torch.log_softmax(S_logits, dim=1)
    L_S = _ce_nll(logp, S_gt.argmax(dim=1)).mean()
    return L_C, L_S


def loss_init_texture(T: Tensor, partial_atlas: Tensor, visibility: Tensor) -> Tensor:
    """Masked L1 between the generated atlas and every visible partial texel.

    T: (n, 3, Ht, Wt); partial_atlas: (b, n, 3, Ht, Wt); visibility: (b, n, Ht, Wt).
    Normalized by the number of visible elements (texels x 3). Returns 0 with a
    warning if nothing is visible.
    """
    sigma = visibility.unsqueeze(2)
    count = sigma.sum() * T.shape[-3]
    if float(count) == 0.0:
        warnings.warn("loss_init_texture: no visible texels in any input", RuntimeWarning, stacklevel=2)
        return (T * 0).sum()
    return (sigma * (T.unsqueeze(0) - partial_atlas).abs()).sum() / count


def perceptual_distance(a: Tensor, b: Tensor, fx: FeatureExtractor) -> Tensor:
    total = a.new_zeros(())
    for w, fa, fb in zip(fx.level_weights, fx(a), fx(b)):
        total = total + w * (fa - fb).abs().mean()
    return total


def image_loss(rendered: Tensor, target: Tensor, mask: Tensor | None, fx: FeatureExtractor | None) -> Tensor:
    """Pixel L1 plus feature L1 against ``mask * target`` (or ``target`` if no mask)."""
    if mask is not None:
        target = target * mask.unsqueeze(1)
    loss = (rendered - target).abs().mean()
    if fx is not None:
        loss = loss + perceptual_distance(rendered, target, fx)
    return loss


def mask_loss(S: Tensor, mask: Tensor) -> Tensor:
    """Binary cross-entropy between the background score and ``1 - mask``."""
    p = S[:, -1].clamp(PROB_EPS, 1 - PROB_EPS)
    y = 1.0 - mask
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def reg_coord(C: Tensor, S: Tensor, C_gt: Tensor, S_gt: Tensor) -> Tensor:
    """UV L1 weighted by the predicted scores, normalized like L_C."""
    n = S.shape[1] - 1
    w = S[:, :n].repeat_interleave(2, dim=1)
    denom = (2 * S_gt[:, :n].sum()).clamp_min(1.0)
    return (w * (C - C_gt).abs()).sum() / denom


def reg_mask(S: Tensor, S_gt: Tensor) -> Tensor:
    """Cross-entropy of S against argmax(S_gt) on ground-truth foreground pixels."""
    fg = 1.0 - S_gt[:, -1]
    logp = torch.log(S.clamp(PROB_EPS, 1.0))
    nll = _ce_nll(logp, S_gt.argmax(dim=1))
    return (fg * nll).sum() / fg.sum().clamp_min(1.0)


def reg_losses(
    T: Tensor, partial_atlas: Tensor, visibility: Tensor, C: Tensor, S: Tensor, C_gt: Tensor, S_gt: Tensor,
) -> tuple[Tensor, Tensor, Tensor]:
    return loss_init_texture(T, partial_atlas, visibility), reg_coord(C, S, C_gt, S_gt), reg_mask(S, S_gt)


def total_loss(terms: Mapping[str, Tensor], w: LossWeights) -> LossReport:
    """Weighted sum of named terms. Keys: image|image_full, mask, reg_texture, reg_coord, reg_mask."""
    weights = asdict(w)
    used = {}
    total = None
    for name, value in terms.items():
        if name not in TERM_WEIGHT:
            raise KeyError(f"unknown loss term {name!r}")
        _finite(name, value)
        lam = weights[TERM_WEIGHT[name]]
        used[name] = lam
        total = lam * value if total is None else total + lam * value
    if total is None:
        total = torch.zeros(())
    return LossReport(terms=dict(terms), weights=used, total=total)


def multivideo_terms(
    fg: Tensor, S: Tensor, C: Tensor, T: Tensor, target: Mapping[str, Tensor],
    partial_atlas: Tensor, visibility: Tensor, fx: FeatureExtractor | None,
) -> dict[str, Tensor]:
    """All multi-video terms for one person batch. ``target`` holds image, mask, uv, part_scores."""
    L_RT, L_RC, L_RM = reg_losses(T, partial_atlas, visibility, C, S, target["uv"], target["part_scores"])
    return {
        "image": image_loss(fg, target["image"], target["mask"], fx),
        "mask": mask_loss(S, target["mask"]),
        "reg_texture": L_RT,
        "reg_coord": L_RC,
        "reg_mask": L_RM,
    }


def test_loss(
    I_hat: Tensor, I_gt: Tensor, S: Tensor, C: Tensor, S_gt: Tensor, C_gt: Tensor, mask: Tensor,
    w: LossWeights, fx: FeatureExtractor | None,
) -> LossReport:
    """Few-shot objective: full-frame image loss, mask loss, UV and part regularizers."""
    terms = {
        "image_full": image_loss(I_hat, I_gt, None, fx),
        "mask": mask_loss(S, mask),
        "reg_coord": reg_coord(C, S, C_gt, S_gt),
        "reg_mask": reg_mask(S, S_gt),
    }
    return total_loss(terms, w)
