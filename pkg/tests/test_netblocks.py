import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from motionxfer import netblocks as nb
from motionxfer.netblocks import CRN, Conv, ConvSpec, ResBlock


def direct_conv(x, w, b, stride):
    """Scalar reference: zero-pad to ceil(size/stride) outputs, extra pad on top/left."""
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    oh, ow = -(-h // stride), -(-wd // stride)
    pt = max((oh - 1) * stride + k - h, 0)
    pl = max((ow - 1) * stride + k - wd, 0)
    top, left = (pt + 1) // 2, (pl + 1) // 2
    out = np.zeros((n, cout, oh, ow))
    for bi in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for c in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                y = i * stride + di - top
                                xx = j * stride + dj - left
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[bi, c, y, xx] * w[o, c, di, dj]
                    out[bi, o, i, j] = acc
    return out


def ref_instance_norm(x, eps=1e-5):
    out = np.empty_like(x)
    for b in range(x.shape[0]):
        for c in range(x.shape[1]):
            v = x[b, c]
            out[b, c] = (v - v.mean()) / math.sqrt(((v - v.mean()) ** 2).mean() + eps)
    return out


def _double(x):
    return torch.from_numpy(np.asarray(x, dtype=np.float64))


@pytest.mark.parametrize("stride,size", [(1, 5), (2, 5), (2, 6)])
def test_conv_matches_direct_loop(rng, stride, size):
    x = rng.normal(size=(1, 2, size, size))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    spec = ConvSpec(2, 3, 3, stride)
    got = nb.conv2d(_double(x), spec, _double(w), _double(b)).numpy()
    np.testing.assert_allclose(got, direct_conv(x, w, b, stride), atol=1e-6)
    assert got.shape[-1] == -(-size // stride)


def test_conv_zero_input_zero_bias_gives_zero():
    spec = ConvSpec(1, 2, 3)
    w = torch.randn(2, 1, 3, 3, dtype=torch.float64)
    out = nb.conv2d(torch.zeros(1, 1, 3, 3, dtype=torch.float64), spec, w, torch.zeros(2, dtype=torch.float64))
    assert torch.count_nonzero(out) == 0


def test_identity_kernel():
    x = torch.randn(1, 1, 4, 5, dtype=torch.float64)
    w = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    w[0, 0, 1, 1] = 1
    assert torch.equal(nb.conv2d(x, ConvSpec(1, 1, 3), w), x)


def test_conv_shape_mismatch():
    with pytest.raises(nb.ConfigError):
        nb.conv2d(torch.zeros(1, 3, 4, 4), ConvSpec(2, 1, 3), torch.zeros(1, 2, 3, 3))
    with pytest.raises(nb.ConfigError):
        nb.conv2d(torch.zeros(1, 2, 4, 4), ConvSpec(2, 1, 3), torch.zeros(1, 2, 5, 5))


@pytest.mark.parametrize("bad", [dict(kernel=4), dict(stride=3), dict(in_channels=0)])
def test_convspec_validation(bad):
    args = dict(in_channels=2, out_channels=2, kernel=3, stride=1)
    args.update(bad)
    with pytest.raises(nb.ConfigError):
        ConvSpec(**args)


@given(size=st.integers(1, 40), kernel=st.sampled_from([1, 3, 5, 7]), stride=st.sampled_from([1, 2]))
def test_same_padding_output_size(size, kernel, stride):
    before, after = nb.same_padding(size, kernel, stride)
    out = (size + before + after - kernel) // stride + 1
    assert out == -(-size // stride)
    assert before - after in (0, 1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_conv_is_linear(seed, alpha, beta):
    g = torch.Generator().manual_seed(seed)
    spec = ConvSpec(2, 3, 3, 2)
    w = torch.randn(3, 2, 3, 3, generator=g, dtype=torch.float64)
    x = torch.randn(1, 2, 5, 5, generator=g, dtype=torch.float64)
    y = torch.randn(1, 2, 5, 5, generator=g, dtype=torch.float64)
    lhs = nb.conv2d(alpha * x + beta * y, spec, w)
    rhs = alpha * nb.conv2d(x, spec, w) + beta * nb.conv2d(y, spec, w)
    assert torch.allclose(lhs, rhs, atol=1e-6)


def test_crn_matches_composed_reference(rng):
    x = rng.normal(size=(2, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    expect = ref_instance_norm(np.maximum(direct_conv(x, w, b, 2), 0))
    got = nb.crn(_double(x), ConvSpec(2, 3, 3, 2), _double(w), _double(b)).numpy()
    np.testing.assert_allclose(got, expect, atol=1e-6)


def test_crn_constant_and_negative_maps_normalize_to_zero():
    spec = ConvSpec(1, 1, 1)
    x = torch.ones(1, 1, 4, 4, dtype=torch.float64)
    pos = nb.crn(x, spec, torch.ones(1, 1, 1, 1, dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64))
    neg = nb.crn(x, spec, -torch.ones(1, 1, 1, 1, dtype=torch.float64))
    assert pos.abs().max() < 1e-9 and torch.isfinite(pos).all()
    assert neg.abs().max() == 0


def test_crn_single_pixel_map_is_finite():
    out = CRN(ConvSpec(2, 3, 3, 2), torch.Generator().manual_seed(0))(torch.randn(1, 2, 1, 1))
    assert torch.isfinite(out).all()


def test_instance_norm_statistics():
    x = 3 + 2 * torch.randn(2, 4, 8, 8, dtype=torch.float64)
    y = nb.instance_norm(x)
    assert y.mean(dim=(2, 3)).abs().max() <= 1e-5
    assert (y.var(dim=(2, 3), unbiased=False) - 1).abs().max() <= 1e-3


def test_resblock_matches_reference(rng):
    blk = ResBlock(3, torch.Generator().manual_seed(2)).double()
    with torch.no_grad():
        for p in blk.parameters():
            p.copy_(torch.from_numpy(rng.normal(size=tuple(p.shape))))
    x = rng.normal(size=(1, 3, 4, 4))
    c1, c2 = blk.conv1, blk.conv2
    h = np.maximum(ref_instance_norm(direct_conv(x, c1.weight.detach().numpy(), c1.bias.detach().numpy(), 1)), 0)
    expect = x + ref_instance_norm(direct_conv(h, c2.weight.detach().numpy(), c2.bias.detach().numpy(), 1))
    np.testing.assert_allclose(blk(_double(x)).detach().numpy(), expect, atol=1e-6)


def test_resblock_identity_with_zero_weights():
    blk = ResBlock(2)
    with torch.no_grad():
        for p in blk.parameters():
            p.zero_()
    x = torch.randn(1, 2, 4, 4)
    assert torch.equal(blk(x), x)
    assert torch.count_nonzero(blk(torch.zeros(1, 2, 4, 4))) == 0


def test_upsample_constant_and_grid():
    assert torch.equal(nb.upsample2x(torch.full((1, 1, 1, 1), 5.0)), torch.full((1, 1, 2, 2), 5.0))
    x = torch.tensor([[[[0.0, 1.0], [2.0, 3.0]]]], dtype=torch.float64)
    # align-corners: output sample i sits at input coordinate i * (2 - 1) / (4 - 1)
    t = np.arange(4) / 3
    expect = 2 * t[:, None] + t[None, :]
    np.testing.assert_allclose(nb.upsample2x(x)[0, 0].numpy(), expect, atol=1e-12)


def test_upsample_reproduces_affine_ramp():
    yy, xx = torch.meshgrid(torch.arange(3.0), torch.arange(4.0), indexing="ij")
    ramp = (0.5 * xx - 2 * yy + 1)[None, None].double()
    up = nb.upsample2x(ramp)[0, 0]
    ys = torch.linspace(0, 2, 6, dtype=torch.float64)
    xs = torch.linspace(0, 3, 8, dtype=torch.float64)
    assert torch.allclose(up, 0.5 * xs[None, :] - 2 * ys[:, None] + 1, atol=1e-12)


def test_param_counts():
    assert ConvSpec(32, 48, 7, 1).param_count == 32 * 48 * 49 + 48
    assert nb.param_count(Conv(ConvSpec(32, 48, 7, 1))) == 32 * 48 * 49 + 48
    assert nb.param_count(ResBlock(4)) == 2 * (4 * 4 * 9 + 4)


def test_kaiming_bound():
    w = nb.kaiming_uniform_(torch.empty(16, 8, 3, 3), torch.Generator().manual_seed(0))
    assert w.abs().max() <= math.sqrt(6 / 72)


@pytest.mark.parametrize(
    "make,shape",
    [
        (lambda g: Conv(ConvSpec(2, 3, 3), g), (1, 2, 4, 4)),
        (lambda g: CRN(ConvSpec(2, 3, 3), g), (1, 2, 4, 4)),
        (lambda g: ResBlock(4, g), (1, 4, 4, 4)),
    ],
    ids=["conv", "crn", "resblock"],
)
def test_block_gradients(make, shape):
    g = torch.Generator().manual_seed(11)
    x = torch.randn(shape, generator=g)
    res = nb.grad_check_module(make(g), x)
    assert res.passed(1e-4), res


def test_grad_check_flags_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x**2

        @staticmethod
        def backward(ctx, g):
            return g  # wrong: should be 2 x g

    x = torch.randn(5, dtype=torch.float64)
    res = nb.grad_check(lambda: Bad.apply(x).sum(), {"x": x})
    assert not res.passed(1e-4) and res.worst == "x"


def test_grad_check_reports_nonfinite():
    x = torch.tensor([-1.0, 2.0], dtype=torch.float64)
    res = nb.grad_check(lambda: torch.sqrt(x).sum(), {"x": x})
    assert "x" in res.nonfinite and not res.ok


def test_relative_error_floor():
    a = torch.tensor([1e-9, 2.0])
    n = torch.tensor([0.0, 1.0])
    np.testing.assert_allclose(nb.relative_error(a, n).numpy(), [1e-3, 0.5], rtol=1e-6)
