"""Geometry generator: target pose + source images -> UV map and part scores.

Three encoders share one layer layout (a stride-1 CRN followed by ``L``
stride-2 CRNs):

* image context encoder (source images)        -> a_j^l
* pose attention encoder (source/target poses)  -> q_j^l, q^l
* target pose encoder (+ residual trunk)        -> d_p

At every stride-2 level the source image features are pooled by attention
between the target pose features and each source pose's features, and fed to
the matching decoder level together with the running decoder state. The
decoder has a mask branch (``n + 1`` score logits) and a coordinate branch
(``2n`` UV channels squashed by a sigmoid).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import Tensor, nn

from .netblocks import CRN, Conv, ConvSpec, ConfigError, ResBlock, param_count, upsample2x


@dataclass(frozen=True)
class GeometryConfig:
    n_parts: int = 8
    stickman_channels: int = 17
    image_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64, 64, 64)
    first_kernel: int = 7
    encoder_kernel: int = 3
    decoder_kernel: int = 5
    head_kernel: int = 7
    resblocks: int = 4
    attention: str = "softmax"  # or "raw": unscaled, unnormalized product

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.n_parts < 1:
            raise ConfigError(f"n_parts must be >= 1, got {self.n_parts}")
        if len(self.channels) < 2:
            raise ConfigError("channels needs the stride-1 width plus at least one level")
        if self.attention not in ("softmax", "raw"):
            raise ConfigError(f"unknown attention mode {self.attention!r}")
        if self.resblocks < 0:
            raise ConfigError("resblocks must be >= 0")

    @property
    def levels(self) -> int:
        return len(self.channels) - 1

    @classmethod
    def paper(cls) -> "GeometryConfig":
        return cls(n_parts=24, stickman_channels=17, channels=(32, 64, 128, 128, 128), resblocks=10)

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


class Encoder(nn.Module):
    """CRN(in, c0, k, 1) followed by CRN(c_i, c_{i+1}, 3, 2) per level."""

    def __init__(self, in_channels: int, cfg: GeometryConfig, generator: torch.Generator | None = None) -> None:
        super().__init__()
        ch = cfg.channels
        self.stem = CRN(ConvSpec(in_channels, ch[0], cfg.first_kernel, 1), generator)
        self.levels = nn.ModuleList(
            CRN(ConvSpec(ch[i], ch[i + 1], cfg.encoder_kernel, 2), generator) for i in range(cfg.levels)
        )

    def forward(self, x: Tensor) -> list[Tensor]:
        h = self.stem(x)
        feats = []
        for layer in self.levels:
            h = layer(h)
            feats.append(h)
        return feats


class DecoderBranch(nn.Module):
    def __init__(self, out_channels: int, cfg: GeometryConfig, generator: torch.Generator | None = None) -> None:
        super().__init__()
        ch = cfg.channels
        # ordered deepest level first
        self.levels = nn.ModuleList(
            CRN(ConvSpec(2 * ch[l], ch[l - 1], cfg.decoder_kernel, 1), generator)
            for l in range(cfg.levels, 0, -1)
        )
        self.head = Conv(ConvSpec(ch[0], out_channels, cfg.head_kernel, 1), generator)

    def forward(self, d_p: Tensor, fused: list[Tensor]) -> Tensor:
        h = d_p
        for layer, d_a in zip(self.levels, reversed(fused)):
            h = layer(upsample2x(torch.cat([d_a, h], dim=1)))
        return self.head(h)


class SourceFeatures(NamedTuple):
    """Per-level encodings of the source set, reusable across targets."""

    a: list[Tensor]  # image context, (b, c_l, H_l, W_l)
    q: list[Tensor]  # pose attention keys, same shapes


def attention_weights(q_src: Tensor, q_tgt: Tensor, mode: str = "softmax") -> Tensor:
    """Similarity of every target position to every (source, position) pair.

    q_src: (b, C, Hs, Ws); q_tgt: (T, C, H, W). Returns (T, N, b * Ns): for
    each target position a distribution over all source positions of all
    sources jointly (softmax mode) or the raw products.
    """
    b, c = q_src.shape[:2]
    keys = q_src.reshape(b, c, -1).transpose(0, 1).reshape(c, -1)  # (C, b*Ns)
    query = q_tgt.reshape(q_tgt.shape[0], c, -1).transpose(1, 2)  # (T, N, C)
    if mode == "raw":
        return query @ keys
    return torch.softmax((query / math.sqrt(c)) @ keys, dim=-1)


def attention_fuse(q_src: Tensor, q_tgt: Tensor, a_src: Tensor, mode: str = "softmax") -> Tensor:
    """Attention-pooled source features d_a, shaped like the target level (T, Ca, H, W)."""
    if q_src.shape[0] != a_src.shape[0] or q_src.shape[2:] != a_src.shape[2:]:
        raise ConfigError(f"source keys {tuple(q_src.shape)} and values {tuple(a_src.shape)} disagree")
    w = attention_weights(q_src, q_tgt, mode)  # (T, N, b*Ns)
    b, ca = a_src.shape[:2]
    values = a_src.reshape(b, ca, -1).transpose(0, 1).reshape(ca, -1)  # (Ca, b*Ns)
    d_a = values @ w.transpose(1, 2)  # (T, Ca, N)
    return d_a.reshape(q_tgt.shape[0], ca, *q_tgt.shape[2:])


def part_scores(logits: Tensor) -> Tensor:
    return torch.softmax(logits, dim=-3)


class GeometryGenerator(nn.Module):
    def __init__(self, cfg: GeometryConfig, seed: int = 0) -> None:
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.image_encoder = Encoder(cfg.image_channels, cfg, gen)
        self.attention_encoder = Encoder(cfg.stickman_channels, cfg, gen)
        self.pose_encoder = Encoder(cfg.stickman_channels, cfg, gen)
        self.trunk = nn.Sequential(*(ResBlock(cfg.channels[-1], gen) for _ in range(cfg.resblocks)))
        self.mask_branch = DecoderBranch(cfg.n_parts + 1, cfg, gen)
        self.coord_branch = DecoderBranch(2 * cfg.n_parts, cfg, gen)

    @property
    def param_count(self) -> int:
        return param_count(self)

    def _check(self, x: Tensor, channels: int, what: str) -> None:
        if x.dim() != 4 or x.shape[1] != channels:
            raise ConfigError(f"{what} must be (N, {channels}, H, W), got {tuple(x.shape)}")
        step = 2 ** self.cfg.levels
        if x.shape[2] % step or x.shape[3] % step:
            raise ConfigError(f"{what} spatial size {tuple(x.shape[2:])} must be divisible by {step}")

    def encode_sources(self, images: Tensor, poses: Tensor) -> SourceFeatures:
        """Encode b foreground-masked source images and their stickmen."""
        self._check(images, self.cfg.image_channels, "source images")
        self._check(poses, self.cfg.stickman_channels, "source poses")
        if images.shape[0] < 1 or images.shape[0] != poses.shape[0]:
            raise ConfigError("need b >= 1 source images, one pose each")
        return SourceFeatures(self.image_encoder(images), self.attention_encoder(poses))

    def fuse(self, pose: Tensor, src: SourceFeatures) -> list[Tensor]:
        q_tgt = self.attention_encoder(pose)
        return [
            attention_fuse(q, qt, a, self.cfg.attention) for a, q, qt in zip(src.a, src.q, q_tgt)
        ]

    def forward(self, pose: Tensor, src: SourceFeatures) -> tuple[Tensor, Tensor]:
        """Target stickmen (T, P, H, W) -> UV map (T, 2n, H, W), score logits (T, n+1, H, W)."""
        self._check(pose, self.cfg.stickman_channels, "target pose")
        fused = self.fuse(pose, src)
        d_p = self.trunk(self.pose_encoder(pose)[-1])
        C = torch.sigmoid(self.coord_branch(d_p, fused))
        logits = self.mask_branch(d_p, fused)
        return C, logits

    def generate(self, pose: Tensor, images: Tensor, poses: Tensor) -> tuple[Tensor, Tensor]:
        return self(pose, self.encode_sources(images, poses))
