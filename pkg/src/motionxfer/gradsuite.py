"""Finite-difference gradient checks for every differentiable component.

Each check builds a small double-precision instance, reduces its output to a
scalar with fixed random probe weights and compares autograd against central
differences. Inputs that feed piecewise-linear operations (bilinear taps,
clamps) are drawn away from the kinks so the difference quotient is valid.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import torch
from torch import Tensor

from . import losses as L
from . import renderer
from .geometry import GeometryConfig, GeometryGenerator, part_scores
from .netblocks import CRN, Conv, ConvSpec, GradCheckResult, ResBlock, Upsample, grad_check, grad_check_module, probe_weights
from .texture import TextureConfig, TextureGenerator

COMPONENT_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class CheckOutcome:
    name: str
    tol: float
    result: GradCheckResult
    seconds: float

    @property
    def passed(self) -> bool:
        return self.result.passed(self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" nonfinite={self.result.nonfinite}" if self.result.nonfinite else ""
        return (f"{status} {self.name:<28} max_rel_err={self.result.max_rel_error:.2e} "
                f"tol={self.tol:.0e} worst={self.result.worst or '-'} ({self.seconds:.1f}s){extra}")


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _rand(*shape: int, seed: int, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    return lo + (hi - lo) * torch.rand(shape, generator=_gen(seed), dtype=torch.float64)


def off_grid_uv(shape: tuple[int, ...], texels: int, seed: int, margin: float = 0.1) -> Tensor:
    """UV values whose texel-space fraction lies in [margin, 1 - margin]."""
    g = _gen(seed)
    cell = torch.randint(0, texels - 1, shape, generator=g).double()
    frac = margin + (1 - 2 * margin) * torch.rand(shape, generator=g, dtype=torch.float64)
    return (cell + frac) / (texels - 1)


def _probe(out: Tensor, seed: int = 99) -> Tensor:
    return (out * probe_weights(out.shape, seed)).sum()


# ---------------------------------------------------------------- renderer


def check_renderer() -> GradCheckResult:
    n, ht, h = 3, 4, 6
    T = _rand(n, 3, ht, ht, seed=1)
    C = off_grid_uv((2 * n, h, h), ht, seed=2)
    S = torch.softmax(_rand(n + 1, h, h, seed=3, lo=-2, hi=2), dim=0)
    B = _rand(3, h, h, seed=4)
    leaves = {"T": T, "C": C, "S": S, "B": B}
    return grad_check(lambda: _probe(renderer.render(T, C, S, B)), leaves)


# ---------------------------------------------------------------- blocks


def _block_check(module_fn: Callable[[torch.Generator], torch.nn.Module], x_shape: tuple[int, ...]) -> GradCheckResult:
    module = module_fn(_gen(5))
    return grad_check_module(module, _rand(*x_shape, seed=6, lo=-1, hi=1))


def check_conv() -> GradCheckResult:
    return _block_check(lambda g: Conv(ConvSpec(2, 3, 3, 1), g), (2, 2, 5, 5))


def check_conv_stride2() -> GradCheckResult:
    return _block_check(lambda g: Conv(ConvSpec(2, 3, 3, 2), g), (2, 2, 6, 6))


def check_crn() -> GradCheckResult:
    return _block_check(lambda g: CRN(ConvSpec(2, 3, 3, 2), g), (2, 2, 6, 6))


def check_resblock() -> GradCheckResult:
    return _block_check(lambda g: ResBlock(3, g), (2, 3, 4, 4))


def check_upsample() -> GradCheckResult:
    return _block_check(lambda g: Upsample(), (1, 2, 3, 3))


# ---------------------------------------------------------------- generators


def tiny_geometry_config() -> GeometryConfig:
    return GeometryConfig(n_parts=2, stickman_channels=3, channels=(2, 3, 3), first_kernel=3,
                          decoder_kernel=3, head_kernel=3, resblocks=1)


def check_geometry_generator(max_coords: int = 3) -> GradCheckResult:
    cfg = tiny_geometry_config()
    net = GeometryGenerator(cfg, seed=3).double()
    images = _rand(2, 3, 8, 8, seed=7)
    poses = _rand(2, cfg.stickman_channels, 8, 8, seed=8)
    target = _rand(2, cfg.stickman_channels, 8, 8, seed=9)
    leaves = {"target_pose": target, "source_images": images, "source_poses": poses}
    leaves.update({f"param.{k}": p for k, p in net.named_parameters()})

    def loss() -> Tensor:
        C, logits = net.generate(target, images, poses)
        return _probe(C, 11) + _probe(part_scores(logits), 12)

    return grad_check(loss, leaves, max_coords=max_coords, seed=1)


def desk_geometry_config() -> GeometryConfig:
    return GeometryConfig(channels=(8, 16, 32, 32, 32), decoder_kernel=3)


def check_geometry_desk(max_coords: int = 2) -> GradCheckResult:
    """Desk-size generator on 16 x 16 inputs.

    The wide stems put many ReLU pre-activations within 1e-4 of zero, so the
    difference step is 1e-5 here.
    """
    cfg = desk_geometry_config()
    net = GeometryGenerator(cfg, seed=3).double()
    images = _rand(2, 3, 16, 16, seed=51)
    poses = _rand(2, cfg.stickman_channels, 16, 16, seed=52)
    target = _rand(1, cfg.stickman_channels, 16, 16, seed=53)
    leaves = {"target_pose": target, "source_images": images, "source_poses": poses}
    leaves.update({f"param.{k}": p for k, p in net.named_parameters()})

    def loss() -> Tensor:
        C, logits = net.generate(target, images, poses)
        return _probe(C, 11) + _probe(part_scores(logits), 12)

    return grad_check(loss, leaves, step=1e-5, max_coords=max_coords, seed=1)


def tiny_texture_config() -> TextureConfig:
    return TextureConfig(n_parts=2, atlas_size=8, channels=(2, 3, 3, 4), first_kernel=3, head_kernel=3, resblocks=1)


def check_texture_generator(max_coords: int = 3) -> GradCheckResult:
    cfg = tiny_texture_config()
    net = TextureGenerator(cfg, seed=4).double()
    partials = _rand(3, cfg.n_parts, 3, cfg.atlas_size, cfg.atlas_size, seed=13)
    leaves = {"partials": partials}
    leaves.update({f"param.{k}": p for k, p in net.named_parameters()})
    return grad_check(lambda: _probe(net(partials), 14), leaves, max_coords=max_coords, seed=2)


def check_texture_embedding(max_coords: int = 24) -> GradCheckResult:
    """Desk-size decoder w.r.t. the averaged embedding (the fine-tuning knob)."""
    net = TextureGenerator(TextureConfig(), seed=4).double()
    t = torch.randn(net.cfg.embedding_shape, generator=_gen(15), dtype=torch.float64)
    return grad_check(lambda: _probe(net.decode(t), 16), {"t": t}, max_coords=max_coords, seed=4)


def check_end_to_end(max_coords: int = 2) -> GradCheckResult:
    """Texture + geometry generators through the renderer into the multi-video objective."""
    gcfg, tcfg = tiny_geometry_config(), tiny_texture_config()
    geo = GeometryGenerator(gcfg, seed=5).double()
    tex = TextureGenerator(tcfg, seed=6).double()
    fx = L.FeatureExtractor(channels=(2, 3), seed=3).double()
    n = gcfg.n_parts
    images = _rand(2, 3, 8, 8, seed=21)
    poses = _rand(2, gcfg.stickman_channels, 8, 8, seed=22)
    partials = _rand(2, n, 3, 8, 8, seed=23)
    vis = (_rand(2, n, 8, 8, seed=24) > 0.5).double()
    target = {
        "image": _rand(2, 3, 8, 8, seed=25),
        "mask": (_rand(2, 8, 8, seed=26) > 0.4).double(),
        "uv": _rand(2, 2 * n, 8, 8, seed=27),
    }
    lab = torch.randint(0, n + 1, (2, 8, 8), generator=_gen(28))
    target["part_scores"] = torch.nn.functional.one_hot(lab, n + 1).permute(0, 3, 1, 2).double()
    pose_t = _rand(2, gcfg.stickman_channels, 8, 8, seed=29)
    leaves = {f"geometry.{k}": p for k, p in geo.named_parameters()}
    leaves.update({f"texture.{k}": p for k, p in tex.named_parameters()})

    def loss() -> Tensor:
        T = tex(partials)
        C, logits = geo.generate(pose_t, images, poses)
        S = part_scores(logits)
        fg = renderer.compose(renderer.render_parts(T, C), S)
        terms = L.multivideo_terms(fg, S, C, T, target, partials, vis, fx)
        return L.total_loss(terms, L.LossWeights()).total

    return grad_check(loss, leaves, max_coords=max_coords, seed=3)


# ---------------------------------------------------------------- losses


def _loss_inputs(n: int = 2, b: int = 2, h: int = 6) -> dict[str, Tensor]:
    lab = torch.randint(0, n + 1, (b, h, h), generator=_gen(31))
    C = _rand(b, 2 * n, h, h, seed=32)
    # keep |C - C_gt| away from the L1 kink
    sign = torch.where(_rand(b, 2 * n, h, h, seed=41) > 0.5, 1.0, -1.0)
    return {
        "C": C,
        "C_gt": C + sign * _rand(b, 2 * n, h, h, seed=33, lo=0.05, hi=0.3),
        "logits": _rand(b, n + 1, h, h, seed=34, lo=-2, hi=2),
        "S_gt": torch.nn.functional.one_hot(lab, n + 1).permute(0, 3, 1, 2).double(),
        "mask": (_rand(b, h, h, seed=35) > 0.5).double(),
        "image": _rand(b, 3, h, h, seed=36),
        "target": _rand(b, 3, h, h, seed=37),
        "T": _rand(n, 3, 4, 4, seed=38),
        "partial": _rand(b, n, 3, 4, 4, seed=39),
        "vis": (_rand(b, n, 4, 4, seed=40) > 0.5).double(),
    }


def check_loss_init_geometry() -> GradCheckResult:
    x = _loss_inputs()
    def f() -> Tensor:
        lc, ls = L.loss_init_geometry(x["C"], x["logits"], x["C_gt"], x["S_gt"])
        return lc + 0.7 * ls
    return grad_check(f, {"C": x["C"], "S_logits": x["logits"]})


def check_loss_init_texture() -> GradCheckResult:
    x = _loss_inputs()
    return grad_check(lambda: L.loss_init_texture(x["T"], x["partial"], x["vis"]), {"T": x["T"]})


def check_image_loss() -> GradCheckResult:
    x = _loss_inputs(h=8)
    fx = L.FeatureExtractor(channels=(3, 4), seed=5).double()
    return grad_check(lambda: L.image_loss(x["image"], x["target"], x["mask"], fx), {"rendered": x["image"]})


def check_mask_loss() -> GradCheckResult:
    x = _loss_inputs()
    return grad_check(lambda: L.mask_loss(torch.softmax(x["logits"], 1), x["mask"]), {"S_logits": x["logits"]})


def check_reg_coord() -> GradCheckResult:
    x = _loss_inputs()
    return grad_check(lambda: L.reg_coord(x["C"], torch.softmax(x["logits"], 1), x["C_gt"], x["S_gt"]),
                      {"C": x["C"], "S_logits": x["logits"]})


def check_reg_mask() -> GradCheckResult:
    x = _loss_inputs()
    return grad_check(lambda: L.reg_mask(torch.softmax(x["logits"], 1), x["S_gt"]), {"S_logits": x["logits"]})


def check_test_loss() -> GradCheckResult:
    x = _loss_inputs(h=8)
    fx = L.FeatureExtractor(channels=(3, 4), seed=6).double()

    def f() -> Tensor:
        S = torch.softmax(x["logits"], 1)
        return L.test_loss(x["image"], x["target"], S, x["C"], x["S_gt"], x["C_gt"], x["mask"],
                           L.LossWeights(), fx).total

    return grad_check(f, {"rendered": x["image"], "C": x["C"], "S_logits": x["logits"]})


CHECKS: dict[str, tuple[Callable[[], GradCheckResult], float]] = {
    "renderer": (check_renderer, COMPONENT_TOL),
    "conv": (check_conv, COMPONENT_TOL),
    "conv_stride2": (check_conv_stride2, COMPONENT_TOL),
    "crn": (check_crn, COMPONENT_TOL),
    "resblock": (check_resblock, COMPONENT_TOL),
    "upsample": (check_upsample, COMPONENT_TOL),
    "loss_init_geometry": (check_loss_init_geometry, COMPONENT_TOL),
    "loss_init_texture": (check_loss_init_texture, COMPONENT_TOL),
    "image_loss": (check_image_loss, COMPONENT_TOL),
    "mask_loss": (check_mask_loss, COMPONENT_TOL),
    "reg_coord": (check_reg_coord, COMPONENT_TOL),
    "reg_mask": (check_reg_mask, COMPONENT_TOL),
    "test_loss": (check_test_loss, COMPONENT_TOL),
    "geometry_generator": (check_geometry_generator, END_TO_END_TOL),
    "geometry_desk": (check_geometry_desk, END_TO_END_TOL),
    "texture_generator": (check_texture_generator, END_TO_END_TOL),
    "texture_embedding": (check_texture_embedding, END_TO_END_TOL),
    "end_to_end": (check_end_to_end, END_TO_END_TOL),
}


def run(names: list[str] | None = None) -> list[CheckOutcome]:
    selected = list(CHECKS) if not names else names
    unknown = [n for n in selected if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient check(s): {', '.join(unknown)}")
    out = []
    for name in selected:
        fn, tol = CHECKS[name]
        t0 = time.perf_counter()
        res = fn()
        out.append(CheckOutcome(name, tol, res, time.perf_counter() - t0))
    return out
