import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from motionxfer import losses as L

N = 2  # parts in the random instances


def instance(seed, b=1, h=4, atlas=4):
    g = np.random.default_rng(seed)
    lab = g.integers(0, N + 1, size=(b, h, h))
    S_gt = np.zeros((b, N + 1, h, h))
    for i in range(b):
        for y in range(h):
            for x in range(h):
                S_gt[i, lab[i, y, x], y, x] = 1
    logits = g.normal(size=(b, N + 1, h, h))
    S = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    return dict(
        C=g.random((b, 2 * N, h, h)), C_gt=g.random((b, 2 * N, h, h)), S_gt=S_gt, lab=lab,
        logits=logits, S=S, mask=1 - S_gt[:, -1],
        T=g.random((N, 3, atlas, atlas)), partial=g.random((3, N, 3, atlas, atlas)),
        vis=(g.random((3, N, atlas, atlas)) > 0.5).astype(float),
        img=g.random((b, 3, h, h)), tgt=g.random((b, 3, h, h)),
    )


def t(a):
    return torch.from_numpy(np.asarray(a, dtype=np.float64))


# ---- scalar references (plain loops over python floats)

def ref_init_geometry(d):
    b, _, h, w = d["C"].shape
    num = den = ce = 0.0
    for i in range(b):
        for y in range(h):
            for x in range(w):
                k = d["lab"][i, y, x]
                if k < N:
                    for c in (2 * k, 2 * k + 1):
                        num += abs(d["C"][i, c, y, x] - d["C_gt"][i, c, y, x])
                        den += 1
                z = sum(math.exp(v) for v in d["logits"][i, :, y, x])
                ce -= max(math.log(math.exp(d["logits"][i, k, y, x]) / z), math.log(1e-6))
    return num / max(den, 1), ce / (b * h * w)


def ref_texture(T, partial, vis):
    num = den = 0.0
    for j in range(partial.shape[0]):
        for k in range(T.shape[0]):
            for y in range(T.shape[2]):
                for x in range(T.shape[3]):
                    if vis[j, k, y, x]:
                        for c in range(3):
                            num += abs(T[k, c, y, x] - partial[j, k, c, y, x])
                            den += 1
    return num / den


def ref_mask(S, mask):
    acc = 0.0
    for p, m in zip(S[:, -1].ravel(), mask.ravel()):
        p = min(max(p, 1e-6), 1 - 1e-6)
        y = 1 - m
        acc -= y * math.log(p) + (1 - y) * math.log(1 - p)
    return acc / mask.size


def ref_reg_coord(d):
    b, _, h, w = d["C"].shape
    num = 0.0
    for i in range(b):
        for y in range(h):
            for x in range(w):
                for k in range(N):
                    for c in (2 * k, 2 * k + 1):
                        num += d["S"][i, k, y, x] * abs(d["C"][i, c, y, x] - d["C_gt"][i, c, y, x])
    den = 2 * (d["lab"] < N).sum()
    return num / max(den, 1)


def ref_reg_mask(d):
    num = den = 0.0
    b, _, h, w = d["S"].shape
    for i in range(b):
        for y in range(h):
            for x in range(w):
                k = d["lab"][i, y, x]
                if k < N:
                    num -= math.log(max(d["S"][i, k, y, x], 1e-6))
                    den += 1
    return num / max(den, 1)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_init_geometry_matches_reference(seed):
    d = instance(seed, b=2)
    lc, ls = L.loss_init_geometry(t(d["C"]), t(d["logits"]), t(d["C_gt"]), t(d["S_gt"]))
    rc, rs = ref_init_geometry(d)
    assert abs(lc.item() - rc) <= 1e-6 and abs(ls.item() - rs) <= 1e-6


def test_init_geometry_trivial_cases():
    d = instance(3)
    lc, _ = L.loss_init_geometry(t(d["C"]), t(d["logits"]), t(d["C"]), t(d["S_gt"]))
    assert lc.item() == 0
    bg = np.zeros_like(d["S_gt"])
    bg[:, -1] = 1
    lc, _ = L.loss_init_geometry(t(d["C"]), t(d["logits"]), t(d["C_gt"]), t(bg))
    assert lc.item() == 0


@pytest.mark.parametrize("seed", [0, 4])
def test_init_texture_matches_reference(seed):
    d = instance(seed)
    got = L.loss_init_texture(t(d["T"]), t(d["partial"]), t(d["vis"])).item()
    assert abs(got - ref_texture(d["T"], d["partial"], d["vis"])) <= 1e-6


def test_init_texture_examples():
    T = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
    vis = torch.ones(1, 1, 2, 2, dtype=torch.float64)
    assert L.loss_init_texture(T, T.unsqueeze(0), vis).item() == 0
    partial = T.clone().unsqueeze(0)
    partial[0, 0, :, 0, :] = 0.5  # half of the visible texels off by 0.5
    assert L.loss_init_texture(T, partial, vis).item() == pytest.approx(0.25)


def test_init_texture_nothing_visible_warns():
    T = torch.rand(2, 3, 2, 2, requires_grad=True)
    with pytest.warns(RuntimeWarning):
        out = L.loss_init_texture(T, torch.rand(1, 2, 3, 2, 2), torch.zeros(1, 2, 2, 2))
    assert out.item() == 0
    out.backward()  # still part of the graph


def test_image_loss_examples():
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    fx = L.FeatureExtractor(seed=1).double()
    assert L.image_loss(x, x, None, fx).item() == 0
    ones = torch.ones(2, 8, 8, dtype=torch.float64)
    assert L.image_loss(x + 0.1, x, ones, None).item() == pytest.approx(0.1)


def test_image_loss_mask_applies_to_target():
    x = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    m = torch.zeros(1, 4, 4, dtype=torch.float64)
    assert L.image_loss(torch.zeros_like(x), x, m, None).item() == 0


def test_feature_term_recomputed():
    g = torch.Generator().manual_seed(0)
    a = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    b = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    fx = L.FeatureExtractor(seed=3).double()
    total = L.image_loss(a, b, None, fx).item()
    pixel = (a - b).abs().mean().item()
    feats = 0.0
    ha, hb = a, b
    for conv in fx.levels:
        ha = torch.relu(torch.nn.functional.conv2d(torch.nn.functional.pad(ha, (1, 0, 1, 0)), conv.weight, conv.bias, stride=2))
        hb = torch.relu(torch.nn.functional.conv2d(torch.nn.functional.pad(hb, (1, 0, 1, 0)), conv.weight, conv.bias, stride=2))
        feats += (ha - hb).abs().mean().item()
    assert abs(total - (pixel + feats)) <= 1e-6


def test_feature_extractor_is_frozen_and_seeded():
    a, b = L.FeatureExtractor(seed=5), L.FeatureExtractor(seed=5)
    assert all(not p.requires_grad for p in a.parameters())
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    assert [lvl.spec.out_channels for lvl in a.levels] == [8, 16, 32, 64]


def test_mask_loss_examples():
    S = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    m = (torch.rand(1, 4, 4) > 0.5).double()
    S[:, -1] = 1 - m
    S[:, 0] = m
    assert L.mask_loss(S, m).item() <= 1e-5
    S[:, -1] = 0.5
    assert L.mask_loss(S, m).item() == pytest.approx(math.log(2))


@pytest.mark.parametrize("seed", [0, 5])
def test_mask_loss_matches_reference(seed):
    d = instance(seed, b=2)
    soft = np.random.default_rng(seed).random(d["mask"].shape)
    assert abs(L.mask_loss(t(d["S"]), t(soft)).item() - ref_mask(d["S"], soft)) <= 1e-6


@pytest.mark.parametrize("seed", [0, 6])
def test_regularizers_match_references(seed):
    d = instance(seed, b=2)
    rc = L.reg_coord(t(d["C"]), t(d["S"]), t(d["C_gt"]), t(d["S_gt"])).item()
    rm = L.reg_mask(t(d["S"]), t(d["S_gt"])).item()
    assert abs(rc - ref_reg_coord(d)) <= 1e-6
    assert abs(rm - ref_reg_mask(d)) <= 1e-6
    rt, rc2, rm2 = L.reg_losses(t(d["T"]), t(d["partial"]), t(d["vis"]), t(d["C"]), t(d["S"]), t(d["C_gt"]), t(d["S_gt"]))
    assert rc2.item() == rc and rm2.item() == rm
    assert abs(rt.item() - ref_texture(d["T"], d["partial"], d["vis"])) <= 1e-6


def test_regularizer_trivial_cases():
    d = instance(7)
    assert L.reg_coord(t(d["C"]), t(d["S"]), t(d["C"]), t(d["S_gt"])).item() == 0
    assert L.reg_mask(t(d["S_gt"]), t(d["S_gt"])).item() <= 1e-5


def test_total_loss_paper_weights():
    one = torch.tensor(1.0)
    terms = {k: one for k in ("image", "mask", "reg_texture", "reg_coord", "reg_mask")}
    assert L.total_loss(terms, L.LossWeights()).total.item() == pytest.approx(23.8)
    zero = L.LossWeights(0, 0, 0, 0, 0)
    assert L.total_loss(terms, zero).total.item() == 0
    rep = L.total_loss({"reg_coord": torch.tensor(0.3)}, L.LossWeights())
    assert rep.total.item() == pytest.approx(6.0)
    assert rep.values() == {"reg_coord": pytest.approx(0.3), "total": pytest.approx(6.0)}


@given(st.lists(st.floats(0, 10), min_size=5, max_size=5), st.lists(st.floats(0, 30), min_size=5, max_size=5))
def test_total_is_weighted_sum(vals, lams):
    names = ("image", "mask", "reg_texture", "reg_coord", "reg_mask")
    w = L.LossWeights(*lams)
    rep = L.total_loss({n: torch.tensor(v, dtype=torch.float64) for n, v in zip(names, vals)}, w)
    assert abs(rep.total.item() - sum(a * b for a, b in zip(vals, lams))) <= 1e-6 * max(1.0, rep.total.item())


def test_total_loss_rejects_nan_naming_term():
    with pytest.raises(L.LossError, match="mask"):
        L.total_loss({"image": torch.tensor(1.0), "mask": torch.tensor(float("nan"))}, L.LossWeights())
    with pytest.raises(KeyError):
        L.total_loss({"bogus": torch.tensor(1.0)}, L.LossWeights())


def test_weights_validation_and_ablation():
    with pytest.raises(ValueError):
        L.LossWeights(reg_coord=-1)
    off = L.LossWeights().without_regularizers()
    assert (off.reg_coord, off.reg_mask, off.reg_texture) == (0, 0, 0)
    assert (off.image, off.mask) == (1, 1)


def test_test_loss_is_the_listed_terms():
    d = instance(8)
    fx = L.FeatureExtractor(seed=2).double()
    w = L.LossWeights()
    rep = L.test_loss(t(d["img"]), t(d["tgt"]), t(d["S"]), t(d["C"]), t(d["S_gt"]), t(d["C_gt"]), t(d["mask"]), w, fx)
    assert set(rep.terms) == {"image_full", "mask", "reg_coord", "reg_mask"}
    expect = (
        L.image_loss(t(d["img"]), t(d["tgt"]), None, fx).item()
        + L.mask_loss(t(d["S"]), t(d["mask"])).item()
        + 20 * ref_reg_coord(d) + 0.8 * ref_reg_mask(d)
    )
    assert abs(rep.total.item() - expect) <= 1e-6
    # same as the training objective with the texture term off and the unmasked image term
    no_rt = L.LossWeights(reg_texture=0.0)
    terms = dict(rep.terms)
    terms["reg_texture"] = torch.tensor(5.0, dtype=torch.float64)
    assert L.total_loss(terms, no_rt).total.item() == pytest.approx(rep.total.item())


def test_test_loss_perfect_reconstruction_is_small():
    d = instance(9)
    S = t(d["S_gt"])
    rep = L.test_loss(t(d["img"]), t(d["img"]), S, t(d["C_gt"]), S, t(d["C_gt"]), t(d["mask"]), L.LossWeights(), None)
    assert rep.total.item() <= 1e-4


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_losses_are_nonnegative(seed):
    d = instance(seed, b=2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        vals = [
            *L.loss_init_geometry(t(d["C"]), t(d["logits"]), t(d["C_gt"]), t(d["S_gt"])),
            L.loss_init_texture(t(d["T"]), t(d["partial"]), t(d["vis"])),
            L.image_loss(t(d["img"]), t(d["tgt"]), t(d["mask"]), None),
            L.mask_loss(t(d["S"]), t(d["mask"])),
            L.reg_coord(t(d["C"]), t(d["S"]), t(d["C_gt"]), t(d["S_gt"])),
            L.reg_mask(t(d["S"]), t(d["S_gt"])),
        ]
    assert all(v.item() >= 0 for v in vals)


def test_multivideo_terms_keys():
    d = instance(10)
    target = {"image": t(d["tgt"]), "mask": t(d["mask"]), "uv": t(d["C_gt"]), "part_scores": t(d["S_gt"])}
    terms = L.multivideo_terms(t(d["img"]), t(d["S"]), t(d["C"]), t(d["T"]), target, t(d["partial"]), t(d["vis"]), None)
    assert set(terms) == {"image", "mask", "reg_texture", "reg_coord", "reg_mask"}
