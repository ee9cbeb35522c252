"""Report figures written straight to files (no pyplot state, no display)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.figure import Figure


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    return path


def training_curves(rows: list, path, window: int = 50, val_rows: list | None = None) -> Path:
    """Per-step losses (log scale) with a moving average of the SR term.

    ``rows`` are dicts as returned by ``train.read_log``; ``val_rows`` are the
    per-epoch validation rows, drawn on a second panel when given.
    """
    steps = np.array([r["step"] for r in rows])
    panels = 2 if val_rows else 1
    fig = Figure(figsize=(6.4 * panels, 4.0))
    ax = fig.add_subplot(1, panels, 1)
    for key in ("sr", "photometric", "smooth", "cycle"):
        v = np.array([r[key] for r in rows])
        if np.any(v > 0):
            ax.plot(steps, np.maximum(v, 1e-12), lw=0.8, alpha=0.6, label=key)
    sr = np.array([r["sr"] for r in rows])
    if len(sr) >= window:
        c = np.cumsum(np.insert(sr, 0, 0.0))
        ax.plot(steps[window - 1:], (c[window:] - c[:-window]) / window, "k", lw=1.6,
                label=f"sr (mean of {window})")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    if val_rows:
        ax2 = fig.add_subplot(1, panels, 2)
        vs = [r["step"] for r in val_rows]
        ax2.plot(vs, [r["psnr"] for r in val_rows], "o-", label="model")
        ax2.plot(vs, [r["bicubic_psnr"] for r in val_rows], "--", color="gray", label="bicubic")
        ax2.set_xlabel("step")
        ax2.set_ylabel("validation PSNR (dB)")
        ax2.legend(fontsize=8)
    return _save(fig, path)


def ablation_bars(rows: list, path, metric: str = "psnr") -> Path:
    """One bar per variant, with the bicubic baseline as a dashed line."""
    labels = [r["variant"] for r in rows]
    vals = [r[metric] for r in rows]
    fig = Figure(figsize=(max(4.0, 1.2 * len(rows)), 3.6))
    ax = fig.add_subplot(1, 1, 1)
    x = np.arange(len(rows))
    ax.bar(x, vals, color="tab:blue")
    if metric == "psnr" and rows and "bicubic_psnr" in rows[0]:
        ax.axhline(rows[0]["bicubic_psnr"], ls="--", color="gray", label="bicubic")
        ax.legend(fontsize=8)
    lo, hi = min(vals), max(vals)
    pad = max(0.05 * (hi - lo), 0.1 if metric == "psnr" else 0.005)
    ax.set_ylim(lo - 4 * pad, hi + 2 * pad)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    return _save(fig, path)


def attention_panel(left, right, M_r2l, V_l2r, V_r2l, disparity, row: int, path) -> Path:
    """Input views, one W x W attention slice, both valid masks and the
    expected-disparity map."""
    fig = Figure(figsize=(12, 6))
    axes = fig.subplots(2, 3)
    panels = [
        (np.clip(left, 0, 1), "left", None),
        (np.clip(right, 0, 1), "right", None),
        (M_r2l[row], f"attention, row {row} (target x source)", "viridis"),
        (V_l2r, "valid mask, left to right", "gray"),
        (V_r2l, "valid mask, right to left", "gray"),
        (disparity, "expected disparity", "magma"),
    ]
    for ax, (img, title, cmap) in zip(axes.ravel(), panels):
        im = ax.imshow(img, cmap=cmap, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        if title == "expected disparity":
            fig.colorbar(im, ax=ax, fraction=0.046)
    for ax in axes[0, :2]:
        ax.axhline(row, color="r", lw=0.6)
    return _save(fig, path)
