"""Parallax attention along epipolar lines.

An attention map has shape ``(..., H, W, W)``: entry ``[i, j, k]`` is the
weight of source column ``k`` for target pixel ``(i, j)``. Rows never mix,
so correspondence is confined to the scanline.

Naming: ``M_r2l`` warps the right view onto the left one (targets are left
pixels, sources are right columns), ``M_l2r`` the reverse.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

TAU = 0.1


@dataclass
class DisparityMap:
    """Horizontal disparities at LR resolution.

    For a left-view map, left pixel ``(i, j)`` corresponds to right column
    ``j - d``; for a right-view map, right pixel ``(i, k)`` corresponds to left
    column ``k + d``. ``occluded`` marks pixels with no correspondence.
    """

    values: np.ndarray
    occluded: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape

    def visible(self) -> np.ndarray:
        if self.occluded is None:
            return np.ones(self.values.shape, dtype=bool)
        return ~self.occluded


# ---------------------------------------------------------------- attention

def add_pam_params(params: dict, rng, channels: int, transition: bool = True, prefix: str = "pam"):
    if transition:
        nn.add_resblock(params, f"{prefix}.transition", rng, channels)
    nn.add_conv(params, f"{prefix}.query", rng, 1, channels, channels)
    nn.add_conv(params, f"{prefix}.key", rng, 1, channels, channels)
    nn.add_conv(params, f"{prefix}.value", rng, 1, channels, channels)
    nn.add_conv(params, f"{prefix}.fusion", rng, 1, 2 * channels + 1, channels)


def _scores(params: dict, prefix: str, target: Tensor, source: Tensor) -> Tensor:
    q = nn.conv(params, f"{prefix}.query", target)
    s = nn.conv(params, f"{prefix}.key", source)
    return T.softmax(T.matmul(q, T.swap_last(s)))


def compute_attention_pair(A: Tensor, B: Tensor, params: dict, prefix: str = "pam"):
    """Return ``(M_B2A, M_A2B)`` computed with one shared set of weights."""
    if A.shape != B.shape:
        raise ValueError(f"feature shapes differ: {A.shape} vs {B.shape}")
    if f"{prefix}.transition.conv1.weight" in params:
        A0 = nn.residual_block(params, f"{prefix}.transition", A)
        B0 = nn.residual_block(params, f"{prefix}.transition", B)
    else:
        A0, B0 = A, B
    return _scores(params, prefix, A0, B0), _scores(params, prefix, B0, A0)


def apply_attention(M, X) -> Tensor:
    """``out[i, j, :] = sum_k M[i, j, k] * X[i, k, :]``."""
    M, X = T.as_tensor(M), T.as_tensor(X)
    if M.shape[-1] != X.shape[-2]:
        raise ValueError(f"attention width {M.shape[-1]} != image width {X.shape[-2]}")
    return T.matmul(M, X)


def compose(M1, M2) -> Tensor:
    """Cycle map ``M1 (x) M2``: first follow M1, then M2."""
    M1, M2 = T.as_tensor(M1), T.as_tensor(M2)
    if M1.shape[-1] != M2.shape[-2]:
        raise ValueError(f"cannot compose {M1.shape} with {M2.shape}")
    return T.matmul(M1, M2)


def valid_mask(M, tau: float = TAU) -> np.ndarray:
    """Binary mask of source pixels that receive more than ``tau`` attention.

    For ``M_l2r`` this is the left-view mask: left pixel ``j`` is valid when
    ``sum_k M_l2r[i, k, j] > tau``.
    """
    m = M.data if isinstance(M, Tensor) else np.asarray(M)
    return (m.sum(axis=-2) > tau).astype(m.dtype)


def _window(mask: np.ndarray, reducer) -> np.ndarray:
    # 3x3 window over the last two axes, borders replicated
    pad = [(0, 0)] * (mask.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(mask, pad, mode="edge")
    H, W = mask.shape[-2:]
    out = p[..., 0:H, 0:W]
    for dy in range(3):
        for dx in range(3):
            out = reducer(out, p[..., dy:dy + H, dx:dx + W])
    return out


def erode(mask):
    return _window(mask, np.minimum)


def dilate(mask):
    return _window(mask, np.maximum)


def morph_cleanup(V) -> np.ndarray:
    """Opening then closing with a 3x3 square (edge-replicated borders).

    Opening drops isolated valid pixels; closing fills isolated holes.
    """
    v = np.asarray(V)
    opened = dilate(erode(v))
    return erode(dilate(opened))


def fuse(A: Tensor, O: Tensor, V, params: dict, prefix: str = "pam") -> Tensor:
    """1x1 conv over the channel stack ``[A | O | V]``."""
    if A.shape != O.shape or A.shape[:-1] != np.shape(V):
        raise ValueError("fusion inputs disagree in extent")
    v = T.as_tensor(np.asarray(V, dtype=A.dtype)[..., None])
    stacked = T.concat([A, O, v], axis=-1)
    return nn.conv(params, f"{prefix}.fusion", stacked)


def parallax_attention(A: Tensor, B: Tensor, params: dict, prefix: str = "pam", cleanup: bool = True):
    """Full module for target view A: attention, warp, valid mask, fusion.

    Returns the fused features and a dict with both maps and both masks.
    """
    M_b2a, M_a2b = compute_attention_pair(A, B, params, prefix)
    R = nn.conv(params, f"{prefix}.value", B)
    O = apply_attention(M_b2a, R)
    V_a = valid_mask(M_a2b)
    V_b = valid_mask(M_b2a)
    if cleanup:
        V_a, V_b = morph_cleanup(V_a), morph_cleanup(V_b)
    fused = fuse(A, O, V_a, params, prefix)
    return fused, {"M_r2l": M_b2a, "M_l2r": M_a2b, "V_l2r": V_a, "V_r2l": V_b}


# ---------------------------------------------------------------- ground truth

def gt_attention_from_disparity(D: DisparityMap, direction: str = "r2l", dtype=None) -> np.ndarray:
    """One-hot (or linearly split) attention rows from a disparity map.

    ``direction="r2l"`` expects a left-view map and places the mass of left
    pixel ``(i, j)`` at right column ``j - d``; ``"l2r"`` expects a right-view
    map and uses column ``k + d``. A fractional source position splits its
    mass between the two neighbouring columns in proportion to proximity.
    Occluded pixels get all-zero rows.
    """
    if direction not in ("r2l", "l2r"):
        raise ValueError(f"unknown direction {direction!r}")
    d = np.asarray(D.values, dtype=np.float64)
    H, W = d.shape
    vis = D.visible()
    M = np.zeros((H, W, W), dtype=dtype or T.get_dtype())
    sign = -1.0 if direction == "r2l" else 1.0
    for i in range(H):
        for j in range(W):
            if not vis[i, j]:
                continue
            if not np.isfinite(d[i, j]) or d[i, j] < 0:
                raise ValueError(f"invalid disparity {d[i, j]} at ({i}, {j})")
            src = j + sign * d[i, j]
            lo = int(np.floor(src))
            frac = src - lo
            hi = lo if frac == 0 else lo + 1
            if lo < 0 or hi > W - 1:
                raise ValueError(f"disparity {d[i, j]} at ({i}, {j}) points outside the row")
            M[i, j, lo] += 1.0 - frac
            if hi != lo:
                M[i, j, hi] += frac
    return M


def expected_disparity(M) -> np.ndarray:
    """``j - sum_k k * M[i, j, k]`` for an r2l map (diagnostic only)."""
    m = M.data if isinstance(M, Tensor) else np.asarray(M)
    W = m.shape[-1]
    cols = np.arange(W, dtype=m.dtype)
    return cols - (m * cols).sum(axis=-1)


def attention_at(M, gt: np.ndarray) -> np.ndarray:
    """Per-pixel attention mass that ``M`` puts on the ground-truth columns."""
    m = M.data if isinstance(M, Tensor) else np.asarray(M)
    return (m * gt).sum(axis=-1)
