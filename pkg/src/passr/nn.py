"""Layers used by the network: convolutions, residual blocks, pixel shuffle.

Parameters live in a flat ``dict`` of named tensors. Layer functions take
that dict plus a name prefix, so the same function serves both views of the
stereo pair with shared weights.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

LEAK = 0.1


def leaky_relu(x: Tensor) -> Tensor:
    return T.leaky_relu(x, LEAK)


def init_conv(rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int, dtype=None):
    """Kaiming-uniform weights for a leaky-ReLU network, zero bias.

    The bound is ``gain * sqrt(3 / fan_in)`` with
    ``gain = sqrt(2 / (1 + 0.1**2))`` and ``fan_in = kh * kw * cin``.
    """
    dtype = dtype or T.get_dtype()
    gain = math.sqrt(2.0 / (1.0 + LEAK ** 2))
    bound = gain * math.sqrt(3.0 / (kh * kw * cin))
    w = rng.uniform(-bound, bound, size=(kh, kw, cin, cout)).astype(dtype)
    b = np.zeros(cout, dtype=dtype)
    return w, b


def add_conv(params: dict, name: str, rng, kh: int, cin: int, cout: int, scale: float = 1.0):
    w, b = init_conv(rng, kh, kh, cin, cout)
    if scale != 1.0:
        w = (w * scale).astype(w.dtype)
    params[f"{name}.weight"] = Tensor(w, requires_grad=True)
    params[f"{name}.bias"] = Tensor(b, requires_grad=True)


def conv(params: dict, name: str, x: Tensor, dilation: int = 1) -> Tensor:
    return T.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], dilation)


def conv2d(x: Tensor, weight, bias=None, dilation: int = 1) -> Tensor:
    return T.conv2d(x, weight, bias, dilation)


def receptive_field(kernel: int, dilation: int) -> int:
    return (kernel - 1) * dilation + 1


# init scale of the last conv on every residual branch; keeps the
# activation variance from doubling per block (no normalisation layers)
BRANCH_SCALE = 0.1


def add_resblock(params: dict, name: str, rng, channels: int):
    add_conv(params, f"{name}.conv1", rng, 3, channels, channels)
    add_conv(params, f"{name}.conv2", rng, 3, channels, channels, scale=BRANCH_SCALE)


def residual_block(params: dict, name: str, x: Tensor) -> Tensor:
    """x + conv2(lrelu(conv1(x))); no activation after the sum."""
    if params[f"{name}.conv1.weight"].shape[2] != x.shape[-1]:
        raise ValueError(f"{name}: channel mismatch")
    h = leaky_relu(conv(params, f"{name}.conv1", x))
    return x + conv(params, f"{name}.conv2", h)


def depth_to_space(x: Tensor, s: int) -> Tensor:
    """Rearrange ``(..., H, W, C*s*s)`` into ``(..., s*H, s*W, C)``.

    ``out[s*i + a, s*j + b, c] = in[i, j, c*s*s + a*s + b]``.
    """
    *lead, H, W, Cs = x.shape
    if Cs % (s * s):
        raise ValueError(f"channels {Cs} not divisible by {s * s}")
    C = Cs // (s * s)
    n = len(lead)
    y = x.reshape(*lead, H, W, C, s, s)
    axes = tuple(range(n)) + (n, n + 3, n + 1, n + 4, n + 2)
    y = y.transpose(axes)
    return y.reshape(*lead, H * s, W * s, C)


def space_to_depth(y, s: int) -> np.ndarray:
    """Inverse of :func:`depth_to_space` on plain arrays."""
    y = np.asarray(y)
    *lead, Hs, Ws, C = y.shape
    H, W = Hs // s, Ws // s
    n = len(lead)
    z = y.reshape(*lead, H, s, W, s, C)
    z = z.transpose(tuple(range(n)) + (n, n + 2, n + 4, n + 1, n + 3))
    return z.reshape(*lead, H, W, C * s * s)


def add_upsampler(params: dict, name: str, rng, channels: int, scale: int):
    if scale not in (2, 4):
        raise ValueError(f"unsupported scale {scale}")
    add_conv(params, name, rng, 1, channels, channels * scale * scale)


def pixel_shuffle_upsample(params: dict, name: str, x: Tensor, scale: int) -> Tensor:
    if scale not in (2, 4):
        raise ValueError(f"unsupported scale {scale}")
    return depth_to_space(conv(params, name, x), scale)
