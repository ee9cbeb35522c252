"""Training objective: SR loss plus three attention consistency terms.

All terms are means rather than raw sums so the weighting does not depend on
patch size. Masked terms average over valid pixels only.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import pam
from . import tensor as T
from .tensor import Tensor


class EmptyMaskWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.005
    photometric: bool = True
    smooth: bool = True
    cycle: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


# checkmark patterns of the loss ablation: SR, +photometric, +smooth, +cycle
LOSS_SUBSETS = {
    "sr": LossWeights(photometric=False, smooth=False, cycle=False),
    "sr+photo": LossWeights(photometric=True, smooth=False, cycle=False),
    "sr+photo+smooth": LossWeights(photometric=True, smooth=True, cycle=False),
    "all": LossWeights(),
}


@dataclass
class LossReport:
    sr: Tensor
    photometric: Tensor
    smooth: Tensor
    cycle: Tensor
    total: Tensor

    def values(self) -> dict:
        return {k: float(getattr(self, k).data) for k in ("sr", "photometric", "smooth", "cycle", "total")}

    def line(self, step: int) -> str:
        v = self.values()
        return "\t".join([str(step)] + [repr(v[k]) for k in ("sr", "photometric", "smooth", "cycle", "total")])


LOG_HEADER = "step\tsr\tphotometric\tsmooth\tcycle\ttotal"


def _zero(like: Tensor | None = None) -> Tensor:
    dtype = like.dtype if like is not None else T.get_dtype()
    return Tensor(np.zeros((), dtype=dtype), op="const")


def sr_loss(sr, hr) -> Tensor:
    sr, hr = T.as_tensor(sr), T.as_tensor(hr)
    if sr.shape != hr.shape:
        raise ValueError(f"SR shape {sr.shape} != HR shape {hr.shape}")
    return T.mean(T.square(sr - hr))


def _masked_l1(err: Tensor, mask) -> Tensor:
    """Sum of per-pixel L1 norms over masked pixels, divided by the number of
    masked elements (pixels times trailing channels)."""
    m = np.asarray(mask, dtype=err.dtype)
    count = float(m.sum())
    if count == 0:
        warnings.warn("valid mask is empty; term contributes 0", EmptyMaskWarning, stacklevel=3)
        return _zero(err)
    return T.tsum(T.tabs(err) * m[..., None]) * (1.0 / (count * err.shape[-1]))


def photometric_loss(left_lr, right_lr, M_r2l, M_l2r, V_l2r, V_r2l) -> Tensor:
    """Masked mean absolute error of both attention warps."""
    left_lr, right_lr = T.as_tensor(left_lr), T.as_tensor(right_lr)
    e_left = left_lr - pam.apply_attention(M_r2l, right_lr)
    e_right = right_lr - pam.apply_attention(M_l2r, left_lr)
    return _masked_l1(e_left, V_l2r) + _masked_l1(e_right, V_r2l)


def smoothness_loss(M_l2r, M_r2l) -> Tensor:
    """Vertical and diagonal attention differences, each averaged over its
    in-bounds terms and summed over both maps."""
    total = None
    for M in (M_l2r, M_r2l):
        M = T.as_tensor(M)
        terms = []
        if M.shape[-3] > 1:
            terms.append(T.mean(T.tabs(M[..., :-1, :, :] - M[..., 1:, :, :])))
        if M.shape[-1] > 1:
            terms.append(T.mean(T.tabs(M[..., :, :-1, :-1] - M[..., :, 1:, 1:])))
        for t in terms:
            total = t if total is None else total + t
    return total if total is not None else _zero()


def cycle_loss(M_l2r, M_r2l, V_l2r, V_r2l) -> Tensor:
    """L1 distance of both cycle maps from the identity, over valid pixels."""
    M_l2r, M_r2l = T.as_tensor(M_l2r), T.as_tensor(M_r2l)
    W = M_l2r.shape[-1]
    eye = np.eye(W, dtype=M_l2r.dtype)
    out = None
    for cyc, V in ((pam.compose(M_r2l, M_l2r), V_l2r), (pam.compose(M_l2r, M_r2l), V_r2l)):
        m = np.asarray(V, dtype=cyc.dtype)
        count = float(m.sum())
        if count == 0:
            term = _zero(cyc)
        else:
            term = T.tsum(T.tabs(cyc - eye) * m[..., None]) * (1.0 / count)
        out = term if out is None else out + term
    return out


def total_loss(sr, hr, left_lr=None, right_lr=None, maps: dict | None = None,
               weights: LossWeights = LossWeights()) -> LossReport:
    """Combine the terms as ``sr + lam * (photometric + smooth + cycle)``.

    Disabled terms (or all three, when ``maps`` carries no attention) are
    reported as 0 and do not enter the total.
    """
    l_sr = sr_loss(sr, hr)
    zero = _zero(l_sr)
    l_ph = l_sm = l_cy = zero
    has_maps = maps is not None and maps.get("M_r2l") is not None
    if has_maps:
        Mr, Ml, Vl, Vr = maps["M_r2l"], maps["M_l2r"], maps["V_l2r"], maps["V_r2l"]
        if weights.photometric:
            l_ph = photometric_loss(left_lr, right_lr, Mr, Ml, Vl, Vr)
        if weights.smooth:
            l_sm = smoothness_loss(Ml, Mr)
        if weights.cycle:
            l_cy = cycle_loss(Ml, Mr, Vl, Vr)
    total = l_sr
    if has_maps and weights.lam > 0 and (weights.photometric or weights.smooth or weights.cycle):
        total = l_sr + (l_ph + l_sm + l_cy) * weights.lam
    return LossReport(l_sr, l_ph, l_sm, l_cy, total)


def combine(sr: float, photometric: float, smooth: float, cycle: float, lam: float) -> float:
    return sr + lam * (photometric + smooth + cycle)
