"""Texture generator: partial atlases -> complete atlas.

Each partial atlas (n, 3, Ht, Wt) is flattened part-major to (3n, Ht, Wt)
(channel ``3 * part + rgb``), encoded to a bottleneck embedding at 1/8 of the
atlas resolution, the embeddings are averaged, and the decoder maps the mean
embedding back to a full atlas in [0, 1]. The averaged embedding is the knob
turned during few-shot fine-tuning.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .netblocks import CRN, Conv, ConvSpec, ConfigError, ResBlock, Upsample, param_count


@dataclass(frozen=True)
class TextureConfig:
    n_parts: int = 8
    atlas_size: int = 32
    channels: tuple[int, ...] = (16, 32, 64, 128)
    first_kernel: int = 7
    decoder_kernel: int = 3
    head_kernel: int = 7
    resblocks: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 4:
            raise ConfigError("texture generator needs 4 channel widths (three stride-2 stages)")
        if self.atlas_size % 8:
            raise ConfigError(f"atlas_size must be divisible by 8, got {self.atlas_size}")

    @classmethod
    def paper(cls) -> "TextureConfig":
        return cls(n_parts=24, atlas_size=128, channels=(64, 128, 256, 512), resblocks=6)

    @property
    def embedding_shape(self) -> tuple[int, int, int]:
        s = self.atlas_size // 8
        return (self.channels[-1], s, s)

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def flatten_atlas(T: Tensor) -> Tensor:
    """(..., n, 3, H, W) -> (..., 3n, H, W), channel index = 3 * part + rgb."""
    return T.reshape(*T.shape[:-4], T.shape[-4] * T.shape[-3], *T.shape[-2:])


def unflatten_atlas(x: Tensor, n_parts: int) -> Tensor:
    return x.reshape(*x.shape[:-3], n_parts, x.shape[-3] // n_parts, *x.shape[-2:])


def merge_embeddings(ts: Tensor | Sequence[Tensor]) -> Tensor:
    """Mean over the source axis; accepts a stacked (b, ...) tensor or a list."""
    if not isinstance(ts, Tensor):
        ts = list(ts)
        if not ts:
            raise ValueError("cannot merge an empty set of embeddings")
        ts = torch.stack(ts)
    if ts.shape[0] == 0:
        raise ValueError("cannot merge an empty set of embeddings")
    return ts.mean(dim=0)


class TextureGenerator(nn.Module):
    def __init__(self, cfg: TextureConfig, seed: int = 0) -> None:
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        c = cfg.channels
        width = 3 * cfg.n_parts
        self.encoder = nn.Sequential(
            CRN(ConvSpec(width, c[0], cfg.first_kernel, 1), gen),
            CRN(ConvSpec(c[0], c[1], 3, 2), gen),
            CRN(ConvSpec(c[1], c[2], 3, 2), gen),
            CRN(ConvSpec(c[2], c[3], 3, 2), gen),
        )
        k = cfg.decoder_kernel
        self.decoder = nn.Sequential(
            *(ResBlock(c[3], gen) for _ in range(cfg.resblocks)),
            Upsample(), CRN(ConvSpec(c[3], c[2], k, 1), gen),
            Upsample(), CRN(ConvSpec(c[2], c[1], k, 1), gen),
            Upsample(), CRN(ConvSpec(c[1], c[0], k, 1), gen),
            Conv(ConvSpec(c[0], width, cfg.head_kernel, 1), gen),
        )

    @property
    def param_count(self) -> int:
        return param_count(self)

    def encode(self, partials: Tensor) -> Tensor:
        """(b, n, 3, Ht, Wt) partial atlases -> (b, *embedding_shape)."""
        cfg = self.cfg
        expected = (cfg.n_parts, 3, cfg.atlas_size, cfg.atlas_size)
        if partials.dim() != 5 or tuple(partials.shape[1:]) != expected:
            raise ConfigError(f"partial atlases must be (b, {', '.join(map(str, expected))}), got {tuple(partials.shape)}")
        return self.encoder(flatten_atlas(partials))

    def decode(self, t: Tensor) -> Tensor:
        """Embedding (*embedding_shape) or batched -> atlas (n, 3, Ht, Wt) in [0, 1]."""
        single = t.dim() == 3
        if single:
            t = t.unsqueeze(0)
        out = unflatten_atlas(torch.sigmoid(self.decoder(t)), self.cfg.n_parts)
        return out[0] if single else out

    def forward(self, partials: Tensor) -> Tensor:
        return self.decode(merge_embeddings(self.encode(partials)))
