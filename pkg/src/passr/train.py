"""Adam, the step-decay schedule, the training loop and ablation runs."""
from __future__ import annotations

import hashlib
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data, losses, metrics, pam
from . import network as net
from . import tensor as T
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


# ---------------------------------------------------------------- optimiser

@dataclass
class OptimState:
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS


def adam_step(params, grads: dict, state: OptimState, lr: float) -> OptimState:
    """One bias-corrected Adam update, applied in place to ``params``.

    ``grads`` maps parameter names to arrays; missing names get a zero
    gradient. A non-finite gradient aborts the step before anything changes.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    t = state.step + 1
    for name, p in params.items():
        w = p.data
        dt = w.dtype.type
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        g = g.astype(w.dtype, copy=False)
        m = state.m.get(name, np.zeros_like(w))
        v = state.v.get(name, np.zeros_like(w))
        m = dt(state.beta1) * m + dt(1 - state.beta1) * g
        v = dt(state.beta2) * v + dt(1 - state.beta2) * (g * g)
        mhat = m / dt(1 - state.beta1 ** t)
        vhat = v / dt(1 - state.beta2 ** t)
        p.data = w - dt(lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
        state.m[name], state.v[name] = m, v
    state.step = t
    return state


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    halve_every: int = 30
    max_epochs: int = 80
    batch: int = 32
    lam: float = 0.005
    seed: int = 0
    steps_per_epoch: int = 100
    steps: int | None = None
    patch_h: int = 30
    patch_w: int = 90
    stride: int = 20
    val_count: int = 8
    losses: str = "all"
    replicated: bool = False
    max_disparity: int = 0

    def validate(self):
        if self.lr <= 0 or self.batch < 1 or self.steps_per_epoch < 1 or self.halve_every < 1:
            raise ValueError("learning rate, batch and epoch lengths must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.losses not in losses.LOSS_SUBSETS:
            raise ValueError(f"unknown loss subset {self.losses!r}")
        if self.total_steps > self.max_epochs * self.steps_per_epoch:
            raise ValueError("step budget exceeds max_epochs")
        return self

    @property
    def total_steps(self) -> int:
        return self.steps if self.steps is not None else self.max_epochs * self.steps_per_epoch

    @property
    def loss_weights(self) -> losses.LossWeights:
        return replace(losses.LOSS_SUBSETS[self.losses], lam=self.lam)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, kv: dict) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv or kv[f.name] is None:
                continue
            v = kv[f.name]
            if isinstance(v, str):
                if f.name in ("lr", "lam"):
                    v = float(v)
                elif f.name == "losses":
                    pass
                elif f.name == "replicated":
                    v = v.lower() in ("1", "true", "yes")
                elif f.name == "steps" and v.lower() == "none":
                    v = None
                else:
                    v = int(v)
            kwargs[f.name] = v
        return cls(**kwargs).validate()


DESK_NETWORK = net.NetworkConfig(channels=32, scale=2, aspp_groups=1,
                                 aspp_repeats=1, post_resblocks=2, global_skip=True)
DESK_TRAIN = TrainConfig(lr=2e-3, halve_every=30, max_epochs=80, batch=4, steps_per_epoch=50,
                         steps=300, patch_h=16, patch_w=48, val_count=8)


def lr_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """``lr * 0.5 ** (epoch // halve_every)``; epochs run from 0 to max_epochs - 1."""
    if epoch < 0 or epoch >= cfg.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.max_epochs})")
    return cfg.lr * 0.5 ** (epoch // cfg.halve_every)


def config_hash(net_cfg: net.NetworkConfig, cfg: TrainConfig, extra: str = "") -> str:
    return hashlib.sha256((net_cfg.to_text() + cfg.to_text() + extra).encode()).hexdigest()[:12]


# ---------------------------------------------------------------- data feeding

def random_scene(rng: np.random.Generator, H: int, W: int, scale: int, max_disparity: int = 0):
    """A random constant-disparity plane or foreground block.

    Disparities are multiples of ``1 / scale`` LR pixels (whole HR pixels),
    so half the scenes carry sub-pixel detail in the second view.
    """
    dmax = max_disparity or max(2, W // 4)
    steps = dmax * scale
    if rng.random() < 0.5:
        return data.Constant(rng.integers(0, steps + 1) / scale)
    bg = rng.integers(0, steps // 2 + 1) / scale
    fg = rng.integers(int(bg * scale) + scale, steps + 1) / scale if bg * scale + scale <= steps else bg
    h0 = int(rng.integers(0, H // 2))
    h1 = int(rng.integers(h0 + 2, H + 1))
    c0 = int(rng.integers(int(math.ceil(fg)) + 1, max(int(math.ceil(fg)) + 2, W // 2)))
    c1 = int(rng.integers(c0 + 2, W + 1))
    return data.ForegroundBlock(bg, fg, (h0, h1), (c0, c1))


def synthetic_sample(seed: int, H: int, W: int, scale: int, max_disparity: int = 0) -> data.StereoSample:
    rng = np.random.default_rng(seed)
    profile = random_scene(rng, H, W, scale, max_disparity)
    return data.synth_stereo(int(rng.integers(2 ** 31)), H, W, profile, scale)


TRAIN_STREAM, VAL_STREAM = 0, 1


def _seed(base: int, stream: int, index: int) -> int:
    return int(np.random.SeedSequence([base, stream, index]).generate_state(1)[0])


def validation_set(cfg: TrainConfig, scale: int, count: int | None = None) -> list:
    """Held-out synthetic pairs from a seed stream disjoint from training."""
    n = cfg.val_count if count is None else count
    return [synthetic_sample(_seed(cfg.seed, VAL_STREAM, k), cfg.patch_h, cfg.patch_w, scale,
                             cfg.max_disparity) for k in range(n)]


class PatchPool:
    """Training patches cut from a manifest's images."""

    def __init__(self, manifest, cfg: TrainConfig, scale: int):
        spec = data.PatchSpec(cfg.patch_h, cfg.patch_w, cfg.stride)
        self.patches = []
        for entry in data.read_manifest(manifest):
            self.patches.extend(data.extract_patches(data.load_entry(entry, scale), spec))
        if not self.patches:
            raise ValueError(f"{manifest}: no training patches")

    def draw(self, seed: int) -> data.StereoSample:
        return self.patches[int(np.random.default_rng(seed).integers(len(self.patches)))]


def training_batch(step: int, cfg: TrainConfig, scale: int, pool: PatchPool | None = None):
    """Batch for a global step; depends only on (seed, step)."""
    samples = []
    for b in range(cfg.batch):
        s = _seed(cfg.seed, TRAIN_STREAM, step * cfg.batch + b)
        smp = pool.draw(s) if pool is not None else synthetic_sample(s, cfg.patch_h, cfg.patch_w, scale,
                                                                     cfg.max_disparity)
        samples.append(data.augment(smp, s ^ 0x5EED))
    return stack(samples)


def stack(samples) -> dict:
    return {k: np.stack([getattr(s, k) for s in samples]).astype(np.float32)
            for k in ("left_lr", "right_lr", "left_hr", "right_hr")}


# ---------------------------------------------------------------- evaluation

def super_resolve(params, config: net.NetworkConfig, left_lr, right_lr, replicated: bool = False):
    right = left_lr if replicated else right_lr
    return net.forward(np.asarray(left_lr, np.float32), np.asarray(right, np.float32), params, config)


def evaluate(params, config: net.NetworkConfig, samples, replicated: bool = False,
             eval_cfg: metrics.EvalConfig | None = None) -> dict:
    """Mean PSNR/SSIM of the model, the bicubic baseline, and attention mass at GT."""
    eval_cfg = eval_cfg or metrics.EvalConfig(border_crop=config.scale)
    ps, ss, base, mass = [], [], [], []
    batch = stack(samples)
    out = super_resolve(params, config, batch["left_lr"], batch["right_lr"], replicated)
    sr = out["sr"].data
    for n, smp in enumerate(samples):
        ps.append(metrics.psnr(sr[n], smp.left_hr, eval_cfg))
        ss.append(metrics.ssim(sr[n], smp.left_hr, eval_cfg))
        base.append(metrics.psnr(data.upscale(smp.left_lr, config.scale), smp.left_hr, eval_cfg))
        if out["M_r2l"] is not None and smp.disparity is not None:
            gt = pam.gt_attention_from_disparity(smp.disparity, "r2l")
            vis = smp.disparity.visible()
            if vis.any():
                mass.append(float(pam.attention_at(out["M_r2l"].data[n], gt)[vis].mean()))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)),
            "bicubic_psnr": float(np.mean(base)),
            "attention_mass": float(np.mean(mass)) if mass else float("nan")}


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    run_dir: Path
    last: Path
    best: Path
    log: Path
    sr_history: list
    val_history: list
    final: dict


def _checkpoint_arrays(params, state: OptimState, best_psnr: float) -> OrderedDict:
    out = OrderedDict(params.arrays())
    for k in params.keys():
        if k in state.m:
            out[f"adam.m/{k}"] = state.m[k]
            out[f"adam.v/{k}"] = state.v[k]
    out["adam.step"] = np.array(state.step, dtype=np.float32)
    out["train.best_psnr"] = np.array(best_psnr, dtype=np.float32)
    return out


def _restore(arrays):
    params = net.store_from_arrays(OrderedDict((k, v) for k, v in arrays.items()
                                               if not k.startswith(net.TRAINING_PREFIXES)))
    state = OptimState(step=int(arrays["adam.step"]))
    for k in params.keys():
        if f"adam.m/{k}" in arrays:
            state.m[k] = np.array(arrays[f"adam.m/{k}"])
            state.v[k] = np.array(arrays[f"adam.v/{k}"])
    return params, state, float(arrays["train.best_psnr"])


def train_step(params, config: net.NetworkConfig, cfg: TrainConfig, batch: dict, state: OptimState, lr: float):
    right = batch["left_lr"] if cfg.replicated else batch["right_lr"]
    out = net.forward(batch["left_lr"], right, params, config)
    report = losses.total_loss(out["sr"], batch["left_hr"], batch["left_lr"], right, out, cfg.loss_weights)
    if not np.isfinite(report.total.data):
        raise NonFiniteError("non-finite loss")
    T.backward(report.total)
    grads = OrderedDict((k, p.grad) for k, p in params.items() if p.grad is not None)
    for p in params.values():
        p.grad = None
    adam_step(params, grads, state, lr)
    return report


def train(config: net.NetworkConfig, cfg: TrainConfig, run_dir, manifest=None, resume=None,
          stop_after: int | None = None) -> TrainResult:
    """Run the training loop, writing logs and checkpoints into ``run_dir``.

    Files: ``train.tsv`` (one loss line per step), ``val.tsv`` (per epoch),
    ``last.ckpt`` and ``best.ckpt`` (with ``.cfg`` sidecars), ``train.cfg``.
    ``stop_after`` ends the run early after that global step (used to test
    resumption).
    """
    config.validate()
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "train.cfg").write_text(cfg.to_text())
    pool = PatchPool(manifest, cfg, config.scale) if manifest else None
    val = validation_set(cfg, config.scale)
    log_path, val_path = run_dir / "train.tsv", run_dir / "val.tsv"
    last, best = run_dir / "last.ckpt", run_dir / "best.ckpt"

    if resume:
        params, state, best_psnr = _restore(net.load_checkpoint(resume))
        mode = "a"
    else:
        params, state, best_psnr = net.build(config, cfg.seed), OptimState(), -math.inf
        mode = "w"
        log_path.write_text(losses.LOG_HEADER + "\n")
        val_path.write_text("epoch\tstep\tlr\tpsnr\tssim\tbicubic_psnr\tattention_mass\n")

    sr_hist, val_hist = [], []
    end = cfg.total_steps if stop_after is None else min(cfg.total_steps, stop_after)
    with open(log_path, "a") as flog, open(val_path, "a") as fval:
        while state.step < end:
            step = state.step
            epoch = step // cfg.steps_per_epoch
            lr = lr_schedule(epoch, cfg)
            batch = training_batch(step, cfg, config.scale, pool)
            report = train_step(params, config, cfg, batch, state, lr)
            flog.write(report.line(state.step) + "\n")
            sr_hist.append(float(report.sr.data))
            if state.step % cfg.steps_per_epoch == 0 or state.step == cfg.total_steps:
                res = evaluate(params, config, val, cfg.replicated)
                val_hist.append(res)
                fval.write(f"{epoch}\t{state.step}\t{lr!r}\t{res['psnr']!r}\t{res['ssim']!r}\t"
                           f"{res['bicubic_psnr']!r}\t{res['attention_mass']!r}\n")
                score = float(np.float32(res["psnr"]))
                if score > best_psnr:
                    best_psnr = score
                    net.save_model(best, params, config)
                _save_state(last, params, state, best_psnr, config)
                log.info("epoch %d step %d psnr %.3f (bicubic %.3f)", epoch, state.step,
                         res["psnr"], res["bicubic_psnr"])
    final = evaluate(params, config, val, cfg.replicated)
    _save_state(last, params, state, best_psnr, config)
    return TrainResult(run_dir, last, best, log_path, sr_hist, val_hist, final)


def _save_state(path, params, state: OptimState, best_psnr: float, config: net.NetworkConfig):
    net.save_checkpoint(path, _checkpoint_arrays(params, state, best_psnr))
    net.config_path_for(path).write_text(config.to_text())


def read_log(path) -> list:
    rows = []
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    for line in lines[1:]:
        rows.append(dict(zip(header, (float(x) for x in line.split("\t")))))
    return rows


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


# ---------------------------------------------------------------- ablations

ARCH_AXES = ("single_input", "no_pam", "no_transition", "no_atrous", "no_aspp_residual")
AXES = ARCH_AXES + ("replicated_inputs", "loss_subsets")


def ablation_variants(axis: str, base_net: net.NetworkConfig, base: TrainConfig):
    """``(label, network config, train config)`` triples for an axis; the full
    model comes first."""
    full = ("full", base_net, base)
    if axis in ARCH_AXES:
        return [full, (axis, replace(base_net, **{axis: True}), base)]
    if axis == "replicated_inputs":
        return [full, ("replicated_inputs", base_net, replace(base, replicated=True))]
    if axis == "loss_subsets":
        return [(name, base_net, replace(base, losses=name)) for name in losses.LOSS_SUBSETS]
    if axis == "all":
        out = [full]
        for a in ARCH_AXES + ("replicated_inputs",):
            out.extend(ablation_variants(a, base_net, base)[1:])
        return out
    raise ValueError(f"unknown ablation axis {axis!r}")


REPORT_COLUMNS = ("variant", "input", "psnr", "ssim", "bicubic_psnr", "attention_mass", "params", "seconds")


def ablate(axis: str, base_net: net.NetworkConfig, base: TrainConfig, out_dir) -> list:
    """Train every variant of ``axis`` under the same seed and budget."""
    out_dir = Path(out_dir)
    rows = []
    for label, ncfg, tcfg in ablation_variants(axis, base_net, base):
        t0 = time.perf_counter()
        res = train(ncfg, tcfg, out_dir / label)
        params, _ = net.load_model(res.last)
        inputs = "left" if ncfg.single_input else ("left-left" if tcfg.replicated else "left-right")
        rows.append({"variant": label, "input": inputs, **{k: res.final[k] for k in
                     ("psnr", "ssim", "bicubic_psnr", "attention_mass")},
                     "params": net.param_count(params), "seconds": time.perf_counter() - t0})
    return rows


def format_report(rows, columns=REPORT_COLUMNS) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)
    lines = ["\t".join(columns)]
    lines += ["\t".join(fmt(r[c]) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"
