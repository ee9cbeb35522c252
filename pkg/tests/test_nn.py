import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from passr import nn
from passr import tensor as T
from passr.tensor import Tensor


def shuffle_by_index_map(x, s):
    """out[s*i + a, s*j + b, c] = in[i, j, c*s*s + a*s + b], one element at a time."""
    H, W, Cs = x.shape
    C = Cs // (s * s)
    out = np.zeros((H * s, W * s, C))
    for i in range(H):
        for j in range(W):
            for c in range(C):
                for a in range(s):
                    for b in range(s):
                        out[s * i + a, s * j + b, c] = x[i, j, c * s * s + a * s + b]
    return out


@pytest.mark.parametrize("s", [2, 4])
def test_depth_to_space_index_map(f64, s, rng):
    x = rng.normal(size=(3, 5, 2 * s * s))
    np.testing.assert_array_equal(nn.depth_to_space(Tensor(x), s).data, shuffle_by_index_map(x, s))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([2, 4]), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 2))
def test_space_to_depth_inverts_shuffle(s, H, W, C, N):
    x = np.random.default_rng(H * 100 + W).normal(size=(N, H, W, C * s * s))
    with T.precision(np.float64):
        y = nn.depth_to_space(Tensor(x), s).data
    assert y.shape == (N, H * s, W * s, C)
    np.testing.assert_array_equal(nn.space_to_depth(y, s), x)


def test_depth_to_space_gradient(f64, rng):
    x = rng.normal(size=(1, 2, 3, 8))
    w = rng.normal(size=(1, 4, 6, 2))
    assert T.finite_diff_check(lambda a: T.tsum(nn.depth_to_space(a, 2) * w), [x], step=1e-6) < 1e-4


def test_depth_to_space_rejects_bad_channels():
    with pytest.raises(ValueError):
        nn.depth_to_space(Tensor(np.zeros((2, 2, 6))), 2)


def test_upsampler_scale_and_shape(rng):
    p = {}
    nn.add_upsampler(p, "up", rng, 4, 2)
    assert p["up.weight"].shape == (1, 1, 4, 16)
    y = nn.pixel_shuffle_upsample(p, "up", Tensor(np.ones((3, 5, 4))), 2)
    assert y.shape == (6, 10, 4)
    with pytest.raises(ValueError):
        nn.add_upsampler(p, "bad", rng, 4, 3)
    with pytest.raises(ValueError):
        nn.pixel_shuffle_upsample(p, "up", Tensor(np.ones((3, 5, 4))), 8)


def test_init_bound_and_zero_bias():
    w, b = nn.init_conv(np.random.default_rng(0), 3, 3, 16, 8)
    bound = math.sqrt(2 / 1.01) * math.sqrt(3 / (9 * 16))
    assert w.shape == (3, 3, 16, 8) and b.shape == (8,)
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.9 * bound
    assert not b.any()


def test_init_is_seeded():
    a, _ = nn.init_conv(np.random.default_rng(3), 3, 3, 2, 2)
    b, _ = nn.init_conv(np.random.default_rng(3), 3, 3, 2, 2)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("k,d,expected", [(3, 1, 3), (3, 4, 9), (3, 8, 17), (1, 1, 1)])
def test_receptive_field(k, d, expected):
    assert nn.receptive_field(k, d) == expected


def test_residual_block_is_identity_plus_branch(f64, rng):
    p = {}
    nn.add_resblock(p, "rb", rng, 3)
    x = rng.normal(size=(4, 5, 3))
    h = T.leaky_relu(T.conv2d(Tensor(x), p["rb.conv1.weight"], p["rb.conv1.bias"]), 0.1)
    branch = T.conv2d(h, p["rb.conv2.weight"], p["rb.conv2.bias"]).data
    np.testing.assert_allclose(nn.residual_block(p, "rb", Tensor(x)).data, x + branch, atol=1e-12)
    # with the branch's last conv zeroed the block is the identity
    p["rb.conv2.weight"].data[:] = 0
    np.testing.assert_array_equal(nn.residual_block(p, "rb", Tensor(x)).data, x)


def test_residual_block_gradient(f64, rng):
    p = {}
    nn.add_resblock(p, "rb", rng, 2)
    names = ["rb.conv1.weight", "rb.conv1.bias", "rb.conv2.weight", "rb.conv2.bias"]
    x = rng.normal(size=(1, 4, 4, 2))
    t = rng.normal(size=(1, 4, 4, 2))

    def f(xx, *ws):
        q = dict(zip(names, ws))
        return T.tsum(nn.residual_block(q, "rb", xx) * t)

    assert T.finite_diff_check(f, [x] + [p[n].data for n in names], step=1e-6) < 1e-4


def test_residual_block_channel_mismatch(rng):
    p = {}
    nn.add_resblock(p, "rb", rng, 3)
    with pytest.raises(ValueError):
        nn.residual_block(p, "rb", Tensor(np.ones((2, 2, 4))))
