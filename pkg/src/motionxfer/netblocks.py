"""Convolutional building blocks shared by the geometry and texture generators.

Notation follows the usual encoder/decoder shorthand:

* ``Conv(a, b, c, d)``: convolution, ``a`` in-channels, ``b`` out-channels,
  ``c x c`` kernel, stride ``d``, "SAME" padding.
* ``CRN(a, b, c, d)``: Conv followed by relu and instance normalization.
* ``ResBlk(a)``: ``x + F(x)`` with ``F`` = conv3x3-norm-relu-conv3x3-norm.
* ``Upsample(2)``: align-corners bilinear upsampling.

Instance normalization carries no affine parameters and no running statistics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch
import torch.nn.functional as F
from torch import Tensor, nn

NORM_EPS = 1e-5


class ConfigError(ValueError):
    """Inconsistent shapes or configuration values."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError(f"channel counts must be >= 1, got {self}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def param_count(self) -> int:
        return self.in_channels * self.out_channels * self.kernel**2 + self.out_channels

    def out_size(self, size: int) -> int:
        return -(-size // self.stride)


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) zero padding giving ``ceil(size / stride)`` outputs.

    Odd totals put the extra row/column before (top/left).
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    before = (total + 1) // 2
    return before, total - before


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.dim() != 4:
        raise ConfigError(f"expected a 4-d (N, C, H, W) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != spec.in_channels:
        raise ConfigError(f"input has {x.shape[1]} channels, {spec} expects {spec.in_channels}")
    expected = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    if tuple(weight.shape) != expected:
        raise ConfigError(f"weight shape {tuple(weight.shape)} != {expected}")
    top, bottom = same_padding(x.shape[2], spec.kernel, spec.stride)
    left, right = same_padding(x.shape[3], spec.kernel, spec.stride)
    if top or bottom or left or right:
        x = F.pad(x, (left, right, top, bottom))
    return F.conv2d(x, weight, bias, stride=spec.stride)


def instance_norm(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


def crn(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    return instance_norm(F.relu(conv2d(x, spec, weight, bias)))


def upsample2x(x: Tensor) -> Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=True)


def kaiming_uniform_(weight: Tensor, generator: torch.Generator | None = None) -> Tensor:
    fan_in = weight.shape[1] * weight.shape[2] * weight.shape[3]
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
    return weight


class Conv(nn.Module):
    def __init__(self, spec: ConvSpec, generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.spec = spec
        self.weight = nn.Parameter(torch.empty(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
        self.bias = nn.Parameter(torch.zeros(spec.out_channels))
        kaiming_uniform_(self.weight, generator)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.spec, self.weight, self.bias)

    def extra_repr(self) -> str:
        s = self.spec
        return f"{s.in_channels}, {s.out_channels}, {s.kernel}, {s.stride}"


class CRN(Conv):
    def forward(self, x: Tensor) -> Tensor:
        return crn(x, self.spec, self.weight, self.bias)


class ResBlock(nn.Module):
    def __init__(self, channels: int, generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.channels = channels
        self.conv1 = Conv(ConvSpec(channels, channels, 3), generator)
        self.conv2 = Conv(ConvSpec(channels, channels, 3), generator)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ConfigError(f"ResBlock({self.channels}) got {x.shape[1]} input channels")
        h = F.relu(instance_norm(self.conv1(x)))
        return x + instance_norm(self.conv2(h))


class Upsample(nn.Module):
    def forward(self, x: Tensor) -> Tensor:
        return upsample2x(x)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: str
    per_tensor: dict[str, float] = field(default_factory=dict)
    nonfinite: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.nonfinite

    def passed(self, tol: float) -> bool:
        return self.ok and self.max_rel_error <= tol


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-6) -> Tensor:
    denom = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(floor)
    return (analytic - numeric).abs() / denom


def grad_check(
    loss_fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    step: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    ``tensors`` are leaf tensors read by ``loss_fn``; they are perturbed in
    place and restored. With ``max_coords`` only that many randomly chosen
    coordinates per tensor are differenced.
    """
    names = list(tensors)
    leaves = [tensors[n] for n in names]
    for t in leaves:
        t.grad = None
        t.requires_grad_(True)
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, leaves, allow_unused=True)

    gen = torch.Generator().manual_seed(seed)
    result = GradCheckResult(max_rel_error=0.0, worst="")
    for name, leaf, grad in zip(names, leaves, analytic):
        if grad is None:
            grad = torch.zeros_like(leaf)
        if not torch.isfinite(grad).all():
            result.nonfinite.append(name)
            continue
        flat = leaf.data.view(-1)
        gflat = grad.reshape(-1)
        if max_coords is not None and flat.numel() > max_coords:
            idx = torch.randperm(flat.numel(), generator=gen)[:max_coords]
        else:
            idx = torch.arange(flat.numel())
        num = torch.empty(len(idx), dtype=gflat.dtype)
        with torch.no_grad():
            for i, j in enumerate(idx.tolist()):
                orig = flat[j].item()
                flat[j] = orig + step
                up = loss_fn().item()
                flat[j] = orig - step
                down = loss_fn().item()
                flat[j] = orig
                num[i] = (up - down) / (2 * step)
        if not torch.isfinite(num).all():
            result.nonfinite.append(name)
            continue
        err = relative_error(gflat[idx].detach(), num, floor).max().item() if len(idx) else 0.0
        result.per_tensor[name] = err
        if err >= result.max_rel_error:
            result.max_rel_error = err
            result.worst = name
    return result


def probe_weights(shape: torch.Size | tuple, seed: int = 1234, dtype=torch.float64) -> Tensor:
    """Fixed random weights turning a tensor output into a scalar probe loss.

    A plain sum is useless after instance normalization (it is identically 0).
    """
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(tuple(shape), generator=gen, dtype=dtype)


def grad_check_module(
    module: nn.Module,
    x: Tensor,
    step: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckResult:
    """Gradient check of a block w.r.t. its input and every parameter (float64)."""
    module = module.double()
    x = x.detach().double().clone()
    with torch.no_grad():
        probe = probe_weights(module(x).shape, seed=seed + 1)
    tensors = {"input": x}
    tensors.update({n: p for n, p in module.named_parameters()})
    return grad_check(lambda: (module(x) * probe).sum(), tensors, step=step, max_coords=max_coords, seed=seed)
