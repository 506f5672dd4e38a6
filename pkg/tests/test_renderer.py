import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from motionxfer import renderer as R
from motionxfer import synthworld as sw
from motionxfer.evalkit import masked_l1


def scalar_sample(tex, u, v):
    """Per-texel reference using plain floats."""
    c, ht, wt = tex.shape
    x = min(max(u, 0.0), 1.0) * (wt - 1)
    y = min(max(v, 0.0), 1.0) * (ht - 1)
    x0 = min(int(np.floor(x)), max(wt - 2, 0))
    y0 = min(int(np.floor(y)), max(ht - 2, 0))
    x1, y1 = min(x0 + 1, wt - 1), min(y0 + 1, ht - 1)
    fx, fy = x - x0, y - y0
    return [
        tex[ch, y0, x0] * (1 - fx) * (1 - fy) + tex[ch, y0, x1] * fx * (1 - fy)
        + tex[ch, y1, x0] * (1 - fx) * fy + tex[ch, y1, x1] * fx * fy
        for ch in range(c)
    ]


def scalar_render(T, C, S, B):
    n = T.shape[0]
    _, h, w = C.shape
    out = np.zeros((3, h, w))
    for y in range(h):
        for x in range(w):
            for ch in range(3):
                acc = S[n, y, x] * B[ch, y, x]
                for k in range(n):
                    acc += S[k, y, x] * scalar_sample(T[k], C[2 * k, y, x], C[2 * k + 1, y, x])[ch]
                out[ch, y, x] = acc
    return out


def random_instance(seed, n=3, h=8, ht=4):
    g = np.random.default_rng(seed)
    T = g.random((n, 3, ht, ht))
    C = g.uniform(-0.1, 1.1, (2 * n, h, h))  # includes clamped values
    S = g.random((n + 1, h, h))
    S /= S.sum(0)
    B = g.random((3, h, h))
    return T, C, S, B


def t(a):
    return torch.from_numpy(np.asarray(a, dtype=np.float64))


def test_sample_corners_and_centre():
    tex = t([[[0.0, 1.0], [2.0, 3.0]]])
    assert R.sample_bilinear(tex, 0.0, 0.0).item() == 0.0
    assert R.sample_bilinear(tex, 1.0, 1.0).item() == 3.0
    assert R.sample_bilinear(tex, 0.5, 0.5).item() == pytest.approx(1.5)
    # u moves along columns, v along rows
    assert R.sample_bilinear(tex, 1.0, 0.0).item() == 1.0
    assert R.sample_bilinear(tex, 0.0, 1.0).item() == 2.0


def test_sample_clamps_out_of_range():
    tex = t([[[0.0, 1.0], [2.0, 3.0]]])
    assert R.sample_bilinear(tex, -3.0, 7.0).item() == 2.0


@given(c=st.floats(0, 1), u=st.floats(-2, 2), v=st.floats(-2, 2))
def test_sample_constant_texture(c, u, v):
    tex = torch.full((3, 5, 4), c, dtype=torch.float64)
    assert torch.allclose(R.sample_bilinear(tex, u, v), torch.full((3,), c, dtype=torch.float64))


def test_sample_one_texel_texture():
    tex = torch.full((3, 1, 1), 0.3, dtype=torch.float64)
    assert torch.allclose(R.sample_bilinear(tex, 0.7, 0.2), tex[:, 0, 0])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_render_matches_scalar_reference(seed):
    T, C, S, B = random_instance(seed)
    got = R.render(t(T), t(C), t(S), t(B)).numpy()
    assert np.abs(got - scalar_render(T, C, S, B)).max() <= 1e-6


def test_batched_equals_per_sample():
    inst = [random_instance(s, n=2) for s in (5, 6)]
    Tb, Cb, Sb, Bb = (t(np.stack([i[j] for i in inst])) for j in range(4))
    batched = R.render(Tb, Cb, Sb, Bb)
    for b, (T, C, S, B) in enumerate(inst):
        assert torch.allclose(batched[b], R.render(t(T), t(C), t(S), t(B)), atol=1e-12)


def test_render_parts_identity_warp_and_constant_uv():
    g = np.random.default_rng(3)
    T = t(g.random((2, 3, 5, 5)))
    ramp = torch.linspace(0, 1, 5, dtype=torch.float64)
    u = ramp[None, :].expand(5, 5)
    v = ramp[:, None].expand(5, 5)
    C = torch.stack([u, v, u, v])
    assert torch.allclose(R.render_parts(T, C), T, atol=1e-12)
    Cc = torch.full((4, 3, 3), 0.3, dtype=torch.float64)
    out = R.render_parts(T, Cc)
    for k in range(2):
        assert torch.allclose(out[k], R.sample_bilinear(T[k], 0.3, 0.3)[:, None, None].expand(3, 3, 3))


def test_render_parts_rejects_wrong_uv_channels():
    with pytest.raises(ValueError):
        R.render_parts(torch.zeros(2, 3, 4, 4), torch.zeros(3, 4, 4))


def test_compose_selection_and_average():
    g = np.random.default_rng(4)
    Rk = t(g.random((2, 3, 4, 4)))
    S = torch.zeros(3, 4, 4, dtype=torch.float64)
    S[1] = 1
    assert torch.equal(R.compose(Rk, S), Rk[1])
    S = torch.zeros(3, 4, 4, dtype=torch.float64)
    S[:2] = 0.5
    assert torch.allclose(R.compose(Rk, S), (Rk[0] + Rk[1]) / 2)


def test_composite_examples():
    fg = torch.rand(3, 4, 4, dtype=torch.float64)
    B = torch.rand(3, 4, 4, dtype=torch.float64)
    S = torch.zeros(2, 4, 4, dtype=torch.float64)
    S[-1] = 1
    assert torch.equal(R.composite(torch.zeros_like(fg), S, B), B)
    S[-1] = 0
    assert torch.equal(R.composite(fg, S, B), fg)
    # one pixel: part score 0.25 with colour 0.4, background score 0.75 with 0.8
    T = torch.full((1, 3, 2, 2), 0.4, dtype=torch.float64)
    C = torch.full((2, 1, 1), 0.5, dtype=torch.float64)
    S1 = torch.tensor([0.25, 0.75], dtype=torch.float64).view(2, 1, 1)
    B1 = torch.full((3, 1, 1), 0.8, dtype=torch.float64)
    assert torch.allclose(R.render(T, C, S1, B1), torch.full((3, 1, 1), 0.7, dtype=torch.float64))


def test_constant_textures_give_constant_image():
    T = torch.full((3, 3, 4, 4), 0.35, dtype=torch.float64)
    _, C, S, B = random_instance(9)
    S = t(S)
    S[:3] /= S[:3].sum(0, keepdim=True)
    S[3] = 0
    out = R.render(T, t(C), S, t(B))
    assert torch.allclose(out, torch.full_like(out, 0.35))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), alpha=st.floats(-2, 2))
def test_linear_in_texture(seed, alpha):
    T, C, S, _ = random_instance(seed, n=2)
    B = torch.zeros(3, 8, 8, dtype=torch.float64)
    a = R.render(alpha * t(T), t(C), t(S), B)
    b = alpha * R.render(t(T), t(C), t(S), B)
    assert torch.allclose(a, b, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_output_in_convex_hull(seed):
    T, C, S, B = random_instance(seed)
    out = R.render(t(T), t(C), t(S), t(B))
    lo = min(T.min(), B.min())
    hi = max(T.max(), B.max())
    assert out.min() >= lo - 1e-12 and out.max() <= hi + 1e-12


def test_render_gradients_sum_loss():
    from motionxfer.gradsuite import off_grid_uv
    from motionxfer.netblocks import grad_check

    T, _, S, B = (t(a) for a in random_instance(12, n=2, h=5, ht=4))
    C = off_grid_uv((4, 5, 5), 4, seed=3)
    res = grad_check(lambda: R.render(T, C, S, B).sum(), {"T": T, "C": C, "S": S, "B": B})
    assert res.passed(1e-4), res


def test_clamped_uv_has_zero_gradient():
    T = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    C = torch.tensor([1.5, 0.3], dtype=torch.float64).view(2, 1, 1).requires_grad_()
    S = torch.tensor([1.0, 0.0], dtype=torch.float64).view(2, 1, 1)
    R.render(T, C, S, torch.zeros(3, 1, 1, dtype=torch.float64)).sum().backward()
    assert C.grad[0].item() == 0.0


def _gt(world, seed=5, frame=17):
    person = sw.make_person(seed, world)
    pose = sw.pose_at(person, frame, world)
    return person, sw.render_gt(person, pose, world)


def test_synthworld_round_trip():
    world = sw.WorldConfig()
    person, gt = _gt(world)
    out = R.render(t(sw.texture_atlas(person, world.atlas_size)), t(gt.uv), t(gt.part_scores),
                   t(sw.background_image(person, world)))
    assert masked_l1(out, t(gt.image), t(gt.mask)) <= 0.02


def test_render_hd_scale_one_is_render():
    T, C, S, B = (t(a) for a in random_instance(2))
    assert torch.equal(R.render_hd(T, C, S, B, 1), R.render(T, C, S, B))
    with pytest.raises(ValueError):
        R.render_hd(T, C, S, B, 0)


def test_render_hd_constant_person():
    _, C, S, _ = random_instance(3)
    T = torch.full((3, 3, 4, 4), 0.6, dtype=torch.float64)
    B = torch.full((3, 8, 8), 0.6, dtype=torch.float64)
    out = R.render_hd(T, t(C), t(S), B, 2)
    assert out.shape == (3, 16, 16)
    assert torch.allclose(out, torch.full_like(out, 0.6))


def test_render_hd_against_native_resolution():
    base = sw.WorldConfig()
    big = sw.WorldConfig(image_size=128)
    person, gt = _gt(base)
    _, gt2 = _gt(big)
    atlas = t(sw.texture_atlas(person, base.atlas_size))
    hd = R.render_hd(atlas, t(gt.uv), t(gt.part_scores), t(sw.background_image(person, base)), 2)
    assert masked_l1(hd, t(gt2.image), t(gt2.mask)) <= 0.05


def test_png_export_clamps(tmp_path):
    from PIL import Image

    img = torch.tensor([-0.5, 0.5, 2.0]).view(3, 1, 1).expand(3, 2, 2)
    arr = R.to_uint8(img)
    assert arr.shape == (2, 2, 3) and arr[0, 0].tolist() == [0, 128, 255]
    R.save_png(tmp_path / "x.png", img)
    assert np.array_equal(np.asarray(Image.open(tmp_path / "x.png")), arr)


def test_atlas_contact_sheet_round_trip():
    T = np.random.default_rng(0).random((4, 3, 5, 5))
    sheet = R.atlas_contact_sheet(T)
    assert sheet.shape == (3, 5, 20)
    assert np.array_equal(R.atlas_from_contact_sheet(sheet, 4), T)
