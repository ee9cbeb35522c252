"""Stereo data: bicubic degradation, synthetic scenes, patches, augmentation, I/O.

Images are float arrays ``(H, W, 3)`` in ``[0, 1]``. Disparities live at LR
resolution (see :class:`passr.pam.DisparityMap` for the sign convention).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .pam import DisparityMap

CUBIC_A = -0.5


# ---------------------------------------------------------------- resampling

def cubic_kernel(x, a: float = CUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(n_in: int, factor: float) -> np.ndarray:
    """``(n_out, n_in)`` resampling matrix for one axis.

    Output sample ``o`` sits at input coordinate ``(o + 0.5) / factor - 0.5``.
    When shrinking, the kernel is stretched by ``1 / factor`` (antialiasing).
    Weights are normalised to sum to 1 and out-of-range taps are clamped to
    the nearest edge sample.
    """
    n_out = n_in * factor
    if abs(n_out - round(n_out)) > 1e-9 or round(n_out) < 1:
        raise ValueError(f"resize of extent {n_in} by {factor} gives degenerate extent {n_out}")
    n_out = int(round(n_out))
    kscale = min(factor, 1.0)
    radius = 2.0 / kscale
    Wm = np.zeros((n_out, n_in))
    for o in range(n_out):
        center = (o + 0.5) / factor - 0.5
        taps = np.arange(math.floor(center - radius), math.ceil(center + radius) + 1)
        w = cubic_kernel(kscale * (center - taps))
        w = w / w.sum()
        np.add.at(Wm[o], np.clip(taps, 0, n_in - 1), w)
    return Wm


def bicubic_resize(img, factor: float) -> np.ndarray:
    """Separable cubic-convolution resize (a = -0.5) of an ``(H, W, ...)`` array."""
    if factor not in (0.25, 0.5, 1, 2, 4):
        raise ValueError(f"unsupported resize factor {factor}")
    img = np.asarray(img)
    if factor == 1:
        return img.copy()
    Wy = resize_weights(img.shape[0], factor)
    Wx = resize_weights(img.shape[1], factor)
    x = img.astype(np.float64)
    out = np.tensordot(Wy, x, axes=(1, 0))
    out = np.moveaxis(np.tensordot(Wx, out, axes=(1, 1)), 0, 1)
    return out.astype(img.dtype if img.dtype.kind == "f" else np.float64)


def downscale(img, s: int) -> np.ndarray:
    return bicubic_resize(img, 1.0 / s)


def upscale(img, s: int) -> np.ndarray:
    return bicubic_resize(img, s)


# ---------------------------------------------------------------- samples

@dataclass
class StereoSample:
    left_hr: np.ndarray
    right_hr: np.ndarray
    left_lr: np.ndarray
    right_lr: np.ndarray
    disparity: DisparityMap | None = None
    disparity_right: DisparityMap | None = None

    @property
    def scale(self) -> int:
        return self.left_hr.shape[0] // self.left_lr.shape[0]

    def validate(self):
        if self.left_lr.shape != self.right_lr.shape or self.left_hr.shape != self.right_hr.shape:
            raise ValueError("left/right extents differ")
        s = self.scale
        if self.left_hr.shape[:2] != (s * self.left_lr.shape[0], s * self.left_lr.shape[1]):
            raise ValueError("HR extents are not a multiple of LR extents")
        return self


def sample_from_hr(left_hr, right_hr, scale: int, disparity=None, disparity_right=None) -> StereoSample:
    """Build a sample by bicubic downscaling; HR is cropped to a multiple of ``scale``."""
    H = left_hr.shape[0] // scale * scale
    W = left_hr.shape[1] // scale * scale
    left_hr = np.asarray(left_hr[:H, :W], dtype=np.float32)
    right_hr = np.asarray(right_hr[:H, :W], dtype=np.float32)
    left_lr = np.clip(downscale(left_hr, scale), 0, 1)
    right_lr = np.clip(downscale(right_hr, scale), 0, 1)
    return StereoSample(left_hr, right_hr, left_lr, right_lr, disparity, disparity_right).validate()


# ---------------------------------------------------------------- synthetic scenes

@dataclass(frozen=True)
class Constant:
    d: float = 0.0


@dataclass(frozen=True)
class ForegroundBlock:
    """A fronto-parallel block at ``foreground`` disparity over a background.

    ``rows`` and ``cols`` give the block's LR window in the left view; the
    defaults centre it.
    """

    background: float = 2.0
    foreground: float = 6.0
    rows: tuple | None = None
    cols: tuple | None = None


@dataclass(frozen=True)
class VerticalGradient:
    """Disparity varying linearly from ``top`` to ``bottom`` across rows."""

    top: float = 1.0
    bottom: float = 4.0


def parse_profile(text: str):
    """``constant:D``, ``block:BG:FG`` or ``gradient:TOP:BOTTOM``."""
    kind, *args = text.split(":")
    vals = [float(a) for a in args]
    if kind == "constant":
        return Constant(*vals)
    if kind == "block":
        return ForegroundBlock(*vals)
    if kind == "gradient":
        return VerticalGradient(*vals)
    raise ValueError(f"unknown disparity profile {text!r}")


def texture(rng: np.random.Generator, H: int, W: int, sigma: float = 2.0, blobs: int = 6) -> np.ndarray:
    """Band-limited colour noise with optional hard-edged discs on top.

    The noise is Gaussian-smoothed with ``sigma`` (HR pixels) and mapped into
    ``[0, 1]``; the discs add sharp edges for the SR model to recover.
    """
    noise = rng.standard_normal((H, W, 3))
    smooth = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="wrap")
    smooth /= smooth.std() + 1e-12
    img = 0.5 + 0.2 * smooth
    yy, xx = np.mgrid[0:H, 0:W]
    for _ in range(blobs):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = rng.uniform(2.0, max(3.0, min(H, W) / 4))
        color = rng.uniform(0.05, 0.95, size=3)
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[inside] = 0.6 * color + 0.4 * img[inside]
    return np.clip(img, 0.0, 1.0)


def _shift_canvas(canvas: np.ndarray, shifts) -> np.ndarray:
    """``out[y, x] = canvas[y, x - shifts[y]]`` with linear interpolation."""
    H, W = canvas.shape[:2]
    out = np.empty_like(canvas)
    xs = np.arange(W)
    for y in range(H):
        src = xs - shifts[y]
        lo = np.floor(src).astype(int)
        f = (src - lo)[:, None]
        a = canvas[y, np.clip(lo, 0, W - 1)]
        b = canvas[y, np.clip(lo + 1, 0, W - 1)]
        out[y] = a if np.all(f == 0) else (1 - f) * a + f * b
    return out


def _layers(profile, H: int, W: int):
    """Per-layer (row disparities, left-view LR mask), back to front."""
    if isinstance(profile, Constant):
        return [(np.full(H, float(profile.d)), np.ones((H, W), bool))]
    if isinstance(profile, VerticalGradient):
        d = np.linspace(profile.top, profile.bottom, H) if H > 1 else np.array([float(profile.top)])
        return [(d, np.ones((H, W), bool))]
    if isinstance(profile, ForegroundBlock):
        r0, r1 = profile.rows or (H // 4, H - H // 4)
        c0, c1 = profile.cols or (W // 3, W - W // 3)
        fg = np.zeros((H, W), bool)
        fg[r0:r1, c0:c1] = True
        return [(np.full(H, float(profile.background)), np.ones((H, W), bool)),
                (np.full(H, float(profile.foreground)), fg)]
    raise TypeError(f"unsupported profile {profile!r}")


# Fine noise with no discs: the band that a learned x2 head can recover
# beyond bicubic is widest for this texture.
TEXTURE_SIGMA = 1.0
TEXTURE_BLOBS = 0


def synth_stereo(seed: int, H: int, W: int, profile=Constant(0.0), scale: int = 2,
                 sigma: float | None = None, blobs: int | None = None) -> StereoSample:
    """Render a layered stereo scene with exact disparity and visibility.

    Each layer is a textured plane at constant disparity per row (the
    foreground block occludes the background). Views are crops of wide layer
    canvases, so border pixels carry real scene content. The left view of a
    layer is its canvas shifted by ``d``; for integer ``d`` the LR left view
    is an exact column shift of the LR canvas, so warping the right LR image
    with the ground-truth attention reproduces the left LR image bit-for-bit
    on visible pixels. Fractional disparities are shifted at HR before
    downscaling, which keeps the sub-pixel detail the second view adds.
    """
    if scale not in (2, 4):
        raise ValueError("scale must be 2 or 4")
    sigma = TEXTURE_SIGMA if sigma is None else sigma
    blobs = TEXTURE_BLOBS if blobs is None else blobs
    rng = np.random.default_rng(seed)
    layers = _layers(profile, H, W)
    dmax = max(float(d.max()) for d, _ in layers)
    if dmax < 0 or any(float(d.min()) < 0 for d, _ in layers):
        raise ValueError("disparities must be nonnegative")
    if dmax > W - 1:
        raise ValueError(f"disparity {dmax} exceeds image width {W}")
    pad = int(math.ceil(dmax)) + 4
    s = scale
    cw = W + 2 * pad

    # which layer is seen at each pixel of each view (later layers on top)
    owner_l = np.zeros((H, W), int)
    owner_r = np.zeros((H, W), int)
    cols = np.arange(W)
    for n, (d, mask) in enumerate(layers):
        owner_l[mask] = n
        for i in range(H):
            src = cols[mask[i]] - d[i]
            ks = np.unique(np.clip(np.round(src).astype(int), -1, W))
            ks = ks[(ks >= 0) & (ks < W)]
            owner_r[i, ks] = n

    views = {"lh": np.zeros((s * H, s * W, 3)), "rh": np.zeros((s * H, s * W, 3)),
             "ll": np.zeros((H, W, 3)), "rl": np.zeros((H, W, 3))}
    for n, (d, _) in enumerate(layers):
        canvas = texture(rng, s * H, s * cw, sigma=sigma, blobs=blobs)
        canvas_lr = downscale(canvas, s)
        d_hr = np.repeat(d * s, s)
        shifted = _shift_canvas(canvas, d_hr)
        integer = np.all(d == np.round(d))
        if integer:
            left_lr = np.stack([canvas_lr[i, pad - int(d[i]):pad - int(d[i]) + W] for i in range(H)])
        else:
            left_lr = downscale(shifted, s)[:, pad:pad + W]
        hsl = slice(s * pad, s * pad + s * W)
        own_lh = np.repeat(np.repeat(owner_l == n, s, 0), s, 1)
        own_rh = np.repeat(np.repeat(owner_r == n, s, 0), s, 1)
        views["lh"][own_lh] = shifted[:, hsl][own_lh]
        views["rh"][own_rh] = canvas[:, hsl][own_rh]
        views["ll"][owner_l == n] = left_lr[owner_l == n]
        views["rl"][owner_r == n] = canvas_lr[:, pad:pad + W][owner_r == n]

    d_left = np.zeros((H, W))
    d_right = np.zeros((H, W))
    occ_left = np.zeros((H, W), bool)
    occ_right = np.zeros((H, W), bool)
    for n, (d, _) in enumerate(layers):
        dd = d[:, None] * np.ones((1, W))
        d_left[owner_l == n] = dd[owner_l == n]
        d_right[owner_r == n] = dd[owner_r == n]
    for i in range(H):
        for j in range(W):
            n, d = owner_l[i, j], d_left[i, j]
            srcs = {j - int(math.floor(d)), j - int(math.ceil(d))}
            occ_left[i, j] = any(k < 0 or k >= W or owner_r[i, k] != n for k in srcs)
            n, d = owner_r[i, j], d_right[i, j]
            srcs = {j + int(math.floor(d)), j + int(math.ceil(d))}
            occ_right[i, j] = any(k < 0 or k >= W or owner_l[i, k] != n for k in srcs)

    f32 = lambda a: np.clip(a, 0.0, 1.0).astype(np.float32)
    return StereoSample(f32(views["lh"]), f32(views["rh"]), f32(views["ll"]), f32(views["rl"]),
                        DisparityMap(d_left, occ_left), DisparityMap(d_right, occ_right)).validate()


def sample_seed(base: int, index: int) -> int:
    """Per-sample seed derived from ``(base, index)`` only."""
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


# ---------------------------------------------------------------- patches

@dataclass(frozen=True)
class PatchSpec:
    height: int = 30
    width: int = 90
    stride: int = 20


def _crop_disparity(D: DisparityMap | None, i0, j0, h, w, sign) -> DisparityMap | None:
    if D is None:
        return None
    vals = D.values[i0:i0 + h, j0:j0 + w].copy()
    occ = (~D.visible()[i0:i0 + h, j0:j0 + w]).copy()
    cols = np.arange(w)[None, :]
    lo = cols + sign * np.floor(vals)
    hi = cols + sign * np.ceil(vals)
    occ |= (np.minimum(lo, hi) < 0) | (np.maximum(lo, hi) > w - 1)
    return DisparityMap(vals, occ)


def crop(sample: StereoSample, i0: int, j0: int, h: int, w: int) -> StereoSample:
    """Aligned LR window ``[i0:i0+h, j0:j0+w]`` of both views with HR counterparts.

    Pixels whose correspondence leaves the window become occluded.
    """
    s = sample.scale
    lr = (slice(i0, i0 + h), slice(j0, j0 + w))
    hr = (slice(s * i0, s * (i0 + h)), slice(s * j0, s * (j0 + w)))
    return StereoSample(sample.left_hr[hr].copy(), sample.right_hr[hr].copy(),
                        sample.left_lr[lr].copy(), sample.right_lr[lr].copy(),
                        _crop_disparity(sample.disparity, i0, j0, h, w, -1),
                        _crop_disparity(sample.disparity_right, i0, j0, h, w, +1))


def patch_origins(H: int, W: int, spec: PatchSpec):
    if H < spec.height or W < spec.width:
        raise ValueError(f"image {H}x{W} is smaller than the {spec.height}x{spec.width} patch")
    rows = range(0, H - spec.height + 1, spec.stride)
    cols = range(0, W - spec.width + 1, spec.stride)
    return [(i, j) for i in rows for j in cols]


def extract_patches(sample: StereoSample, spec: PatchSpec) -> list:
    H, W = sample.left_lr.shape[:2]
    return [crop(sample, i, j, spec.height, spec.width) for i, j in patch_origins(H, W, spec)]


# ---------------------------------------------------------------- augmentation

def _flip_d(D, axis):
    if D is None:
        return None
    return DisparityMap(np.flip(D.values, axis).copy(),
                        None if D.occluded is None else np.flip(D.occluded, axis).copy())


def vflip(sample: StereoSample) -> StereoSample:
    f = lambda a: np.flip(a, 0).copy()
    return StereoSample(f(sample.left_hr), f(sample.right_hr), f(sample.left_lr), f(sample.right_lr),
                        _flip_d(sample.disparity, 0), _flip_d(sample.disparity_right, 0))


def hflip_swap(sample: StereoSample) -> StereoSample:
    """Mirror both views and exchange them.

    A mirrored right image is geometrically a left image, so disparities
    stay nonnegative: the new left map is the mirrored old right map.
    """
    f = lambda a: np.flip(a, 1).copy()
    return StereoSample(f(sample.right_hr), f(sample.left_hr), f(sample.right_lr), f(sample.left_lr),
                        _flip_d(sample.disparity_right, 1), _flip_d(sample.disparity, 1))


def augment(sample: StereoSample, seed: int) -> StereoSample:
    """Random vertical flip and random horizontal flip-and-swap; never rotates."""
    rng = np.random.default_rng(seed)
    v, h = rng.random(2) < 0.5
    if v:
        sample = vflip(sample)
    if h:
        sample = hflip_swap(sample)
    return sample


# ---------------------------------------------------------------- files

def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise ValueError(f"{path}: expected an 8-bit RGB image, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except OSError as e:
        raise ValueError(f"{path}: unreadable image ({e})") from e
    return arr.astype(np.float32) / 255.0


def quantize(img) -> np.ndarray:
    """Clamp to ``[0, 1]`` and round half away from zero to 8 bits."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(x + 0.5).astype(np.uint8)


def save_image(path, img):
    arr = quantize(img)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    Image.fromarray(arr, "RGB").save(path)


def save_gray(path, img):
    Image.fromarray(quantize(img), "L").save(path)


def save_disparity(path, D: DisparityMap):
    """Plain-text grid: ``H W`` header, then row-major values; ``nan`` marks occlusion."""
    vals = np.asarray(D.values, dtype=np.float64).copy()
    if D.occluded is not None:
        vals[D.occluded] = np.nan
    H, W = vals.shape
    lines = [f"{H} {W}"] + [" ".join(repr(float(v)) for v in row) for row in vals]
    Path(path).write_text("\n".join(lines) + "\n")


def load_disparity(path) -> DisparityMap:
    tokens = Path(path).read_text().split()
    H, W = int(tokens[0]), int(tokens[1])
    vals = np.array([float(t) for t in tokens[2:]], dtype=np.float64)
    if vals.size != H * W:
        raise ValueError(f"{path}: expected {H * W} values, found {vals.size}")
    vals = vals.reshape(H, W)
    occ = np.isnan(vals)
    return DisparityMap(np.where(occ, 0.0, vals), occ if occ.any() else None)


@dataclass(frozen=True)
class ManifestEntry:
    left: Path
    right: Path
    disparity: Path | None = None


def read_manifest(path) -> list:
    """Whitespace-separated ``left right [disparity]`` per line, ``#`` comments.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    entries = []
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"{path}: bad manifest line {raw!r}")
        p = [base / x if not Path(x).is_absolute() else Path(x) for x in parts]
        entries.append(ManifestEntry(p[0], p[1], p[2] if len(p) == 3 else None))
    return entries


def write_manifest(path, entries):
    path = Path(path)
    lines = []
    for e in entries:
        parts = [e.left, e.right] + ([e.disparity] if e.disparity is not None else [])
        lines.append(" ".join(str(Path(p).relative_to(path.parent)) if Path(p).is_relative_to(path.parent)
                              else str(p) for p in parts))
    path.write_text("\n".join(lines) + "\n")


def write_synthetic_dataset(out_dir, count: int, H: int, W: int, scale: int, seed: int,
                            profile=Constant(2.0)) -> Path:
    """Write HR PNG pairs, LR disparity grids and a manifest; return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for n in range(count):
        smp = synth_stereo(sample_seed(seed, n), H, W, profile, scale)
        lp, rp, dp = out / f"{n:04d}_left.png", out / f"{n:04d}_right.png", out / f"{n:04d}_disp.txt"
        save_image(lp, smp.left_hr)
        save_image(rp, smp.right_hr)
        save_disparity(dp, smp.disparity)
        entries.append(ManifestEntry(lp, rp, dp))
    manifest = out / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest


def load_entry(entry: ManifestEntry, scale: int) -> StereoSample:
    left, right = load_image(entry.left), load_image(entry.right)
    if left.shape != right.shape:
        raise ValueError(f"{entry.left} and {entry.right} differ in size")
    D = load_disparity(entry.disparity) if entry.disparity is not None else None
    return sample_from_hr(left, right, scale, D)
