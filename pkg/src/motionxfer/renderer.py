"""Differentiable part-based rendering.

Each body part ``k`` owns a texture ``T[k]`` (3 x Ht x Wt) and a UV field
``C[2k:2k+2]``. A part is rendered by bilinearly sampling its texture through
its UV field, parts are blended by the soft part scores ``S[:n]`` and the
background enters through the last score channel::

    R[k]  = T[k](C[2k], C[2k+1])
    fg    = sum_k S[k] * R[k]
    image = S[n] * B + fg

UV coordinates use the align-corners convention (``u = 0`` is the centre of the
first texel column, ``u = 1`` the centre of the last) and are clamped to
[0, 1], which zeroes the gradient on a clamped axis.

All functions accept batched tensors (leading batch dim) or a single unbatched
sample. Gradients come from autograd through ``torch.gather``.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor


def _texel_coords(coord: Tensor, size: int) -> tuple[Tensor, Tensor]:
    """Integer base index and fractional weight of a normalized coordinate."""
    pos = coord.clamp(0.0, 1.0) * (size - 1)
    if size == 1:
        return torch.zeros_like(pos, dtype=torch.long), torch.zeros_like(pos)
    base = pos.detach().floor().clamp(max=size - 2)
    return base.long(), pos - base


def sample_bilinear(texture: Tensor, u: Tensor | float, v: Tensor | float) -> Tensor:
    """Sample ``texture`` (C x Ht x Wt) at normalized coordinates (u, v).

    ``u`` indexes columns, ``v`` rows. ``u`` and ``v`` may be scalars or tensors
    of any (equal) shape; the result has shape ``(C, *u.shape)``.
    """
    u = torch.as_tensor(u, dtype=texture.dtype)
    v = torch.as_tensor(v, dtype=texture.dtype)
    c, ht, wt = texture.shape
    shape = u.shape
    x0, fx = _texel_coords(u.reshape(-1), wt)
    y0, fy = _texel_coords(v.reshape(-1), ht)
    x1 = (x0 + 1).clamp(max=wt - 1)
    y1 = (y0 + 1).clamp(max=ht - 1)
    flat = texture.reshape(c, ht * wt)

    def tap(yy: Tensor, xx: Tensor) -> Tensor:
        return flat[:, yy * wt + xx]

    out = (
        tap(y0, x0) * (1 - fx) * (1 - fy)
        + tap(y0, x1) * fx * (1 - fy)
        + tap(y1, x0) * (1 - fx) * fy
        + tap(y1, x1) * fx * fy
    )
    return out.reshape(c, *shape)


def render_parts(T: Tensor, C: Tensor) -> Tensor:
    """Sample every part texture through its UV field.

    T: (B, n, 3, Ht, Wt) or (n, 3, Ht, Wt); C: (B, 2n, H, W) or (2n, H, W).
    Returns R: (B, n, 3, H, W) (or unbatched).
    """
    unbatched = C.dim() == 3
    if unbatched:
        C = C.unsqueeze(0)
    if T.dim() == 4:
        T = T.unsqueeze(0).expand(C.shape[0], *T.shape)
    b, n, ch, ht, wt = T.shape
    h, w = C.shape[-2:]
    if C.shape[1] != 2 * n:
        raise ValueError(f"UV map has {C.shape[1]} channels, expected {2 * n} for {n} parts")
    u = C[:, 0::2].reshape(b, n, h * w)
    v = C[:, 1::2].reshape(b, n, h * w)
    x0, fx = _texel_coords(u, wt)
    y0, fy = _texel_coords(v, ht)
    x1 = (x0 + 1).clamp(max=wt - 1)
    y1 = (y0 + 1).clamp(max=ht - 1)
    flat = T.reshape(b, n, ch, ht * wt)

    def tap(yy: Tensor, xx: Tensor) -> Tensor:
        idx = (yy * wt + xx).unsqueeze(2).expand(b, n, ch, h * w)
        return torch.gather(flat, 3, idx)

    fx = fx.unsqueeze(2)
    fy = fy.unsqueeze(2)
    R = (
        tap(y0, x0) * (1 - fx) * (1 - fy)
        + tap(y0, x1) * fx * (1 - fy)
        + tap(y1, x0) * (1 - fx) * fy
        + tap(y1, x1) * fx * fy
    ).reshape(b, n, ch, h, w)
    return R[0] if unbatched else R


def compose(R: Tensor, S: Tensor) -> Tensor:
    """Foreground image: parts weighted by their scores (background excluded)."""
    n = R.shape[-4]
    return (S[..., :n, :, :].unsqueeze(-3) * R).sum(dim=-4)


def composite(fg: Tensor, S: Tensor, B: Tensor) -> Tensor:
    """Add the background weighted by the background score channel."""
    return S[..., -1:, :, :] * B + fg


def render(T: Tensor, C: Tensor, S: Tensor, B: Tensor) -> Tensor:
    return composite(compose(render_parts(T, C), S), S, B)


def _resize(x: Tensor, scale: int) -> Tensor:
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    x = F.interpolate(x, scale_factor=scale, mode="bilinear", align_corners=False)
    return x[0] if squeeze else x


def render_hd(T: Tensor, C: Tensor, S: Tensor, B: Tensor, scale: int) -> Tensor:
    """Render at ``scale`` times the resolution of C/S/B.

    UV map, scores and background are bilinearly upsampled (pixel-centre
    aligned); scores are renormalized per pixel. The atlas is used as is, so a
    higher-resolution atlas directly buys detail.
    """
    if scale < 1:
        raise ValueError(f"scale must be >= 1, got {scale}")
    if scale == 1:
        return render(T, C, S, B)
    C2 = _resize(C, scale)
    S2 = _resize(S, scale)
    S2 = S2 / S2.sum(dim=-3, keepdim=True).clamp_min(1e-12)
    B2 = _resize(B, scale)
    return render(T, C2, S2, B2)


def to_uint8(img: Tensor | np.ndarray) -> np.ndarray:
    """(3, H, W) float image -> (H, W, 3) uint8, clamped to [0, 1] first."""
    if isinstance(img, Tensor):
        img = img.detach().cpu().numpy()
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
    return np.round(arr * 255.0).astype(np.uint8)


def save_png(path: str | Path, img: Tensor | np.ndarray) -> None:
    from PIL import Image

    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def atlas_contact_sheet(T: Tensor | np.ndarray) -> np.ndarray:
    """Lay an (n, 3, Ht, Wt) atlas out as one (3, Ht, n*Wt) image, parts in a row."""
    if isinstance(T, Tensor):
        T = T.detach().cpu().numpy()
    return np.concatenate(list(T), axis=-1)


def atlas_from_contact_sheet(sheet: np.ndarray, n_parts: int) -> np.ndarray:
    c, ht, total = sheet.shape
    if total % n_parts:
        raise ValueError(f"sheet width {total} not divisible by {n_parts} parts")
    return np.stack(np.split(sheet, n_parts, axis=-1))
