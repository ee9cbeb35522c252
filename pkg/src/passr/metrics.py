"""PSNR and SSIM with border cropping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class EvalConfig:
    border_crop: int = 2
    window: int = 11
    sigma: float = 1.5
    data_range: float = 1.0
    quantized: bool = False


def crop_border(img, b: int) -> np.ndarray:
    img = np.asarray(img)
    H, W = img.shape[:2]
    if b < 0 or 2 * b >= H or 2 * b >= W:
        raise ValueError(f"border crop {b} too large for {H}x{W}")
    return img[b:H - b, b:W - b] if b else img


def _prepare(a, b, cfg: EvalConfig):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if cfg.quantized:
        a = np.floor(np.clip(a, 0, 1) * 255 + 0.5) / 255
        b = np.floor(np.clip(b, 0, 1) * 255 + 0.5) / 255
    return crop_border(a, cfg.border_crop), crop_border(b, cfg.border_crop)


def psnr(a, b, cfg: EvalConfig = EvalConfig()) -> float:
    """``10 log10(R^2 / MSE)`` on the cropped region; identical inputs give 99 dB."""
    a, b = _prepare(a, b, cfg)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(cfg.data_range ** 2 / mse))


def to_luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (H, W) or (H, W, 3), got {img.shape}")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, g1: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation with a symmetric 1-D kernel
    n = g1.size
    H, W = img.shape
    rows = sum(g1[k] * img[k:H - n + 1 + k] for k in range(n))
    return sum(g1[k] * rows[:, k:W - n + 1 + k] for k in range(n))


def ssim_map(a, b, cfg: EvalConfig = EvalConfig()) -> np.ndarray:
    a, b = _prepare(a, b, cfg)
    x, y = to_luma(a), to_luma(b)
    if min(x.shape) < cfg.window:
        raise ValueError(f"image {x.shape} smaller than the {cfg.window}x{cfg.window} window")
    g = np.exp(-((np.arange(cfg.window) - (cfg.window - 1) / 2) ** 2) / (2 * cfg.sigma ** 2))
    g /= g.sum()
    C1 = (0.01 * cfg.data_range) ** 2
    C2 = (0.03 * cfg.data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    return ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))


def ssim(a, b, cfg: EvalConfig = EvalConfig()) -> float:
    """Mean local SSIM on luma with an 11x11 Gaussian window (sigma 1.5)."""
    return float(ssim_map(a, b, cfg).mean())
