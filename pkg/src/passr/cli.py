"""Command-line entry point: train, eval, sr, inspect, ablate, synth."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import data, metrics, pam, plotting
from . import network as net
from . import train as tr

log = logging.getLogger("passr")

NET_KEYS = {f.name for f in fields(net.NetworkConfig)}
TRAIN_KEYS = {f.name for f in fields(tr.TrainConfig)}

# flag dest -> config key
FLAG_KEYS = {"scale": "scale", "channels": "channels", "seed": "seed", "steps": "steps",
             "batch": "batch", "lr": "lr", "lam": "lam", "losses": "losses",
             "patch_h": "patch_h", "patch_w": "patch_w", "steps_per_epoch": "steps_per_epoch"}


class CliError(Exception):
    pass


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key=value file; flags override it")
    p.add_argument("--desk", action="store_true", help="start from the reduced CPU-sized presets")
    p.add_argument("--scale", type=int, choices=(2, 4))
    p.add_argument("--channels", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--losses", choices=sorted(tr.losses.LOSS_SUBSETS))
    p.add_argument("--patch-h", type=int)
    p.add_argument("--patch-w", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--out-dir", type=Path, default=Path("runs"))
    p.add_argument("--manifest", type=Path)
    for flag in net.ABLATION_FLAGS + ("global_skip",):
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, action="store_true", default=None)
    p.add_argument("--replicated", action="store_true", default=None,
                   help="feed the left view to both inputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="passr", description="Stereo super-resolution with parallax attention.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--resume", type=Path, help="continue from a last.ckpt")

    p = sub.add_parser("eval", help="PSNR/SSIM over a manifest")
    _common(p)
    p.add_argument("--ckpt", type=Path)
    p.add_argument("--pred-manifest", type=Path,
                   help="score these images against --manifest instead of running a model")
    p.add_argument("--quantized", action="store_true", help="round to 8 bits before scoring")

    p = sub.add_parser("sr", help="super-resolve one LR pair")
    p.add_argument("--left", type=Path, required=True)
    p.add_argument("--right", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--scale", type=int, choices=(2, 4))
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("inspect", help="attention slices, valid masks, expected disparity")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--left", type=Path, help="LR left image (default: a synthetic pair)")
    p.add_argument("--right", type=Path)
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--profile", default="block:1:3", help="synthetic disparity profile")

    p = sub.add_parser("ablate", help="train variants under one seed and budget")
    _common(p)
    p.add_argument("--axis", required=True, choices=tr.AXES + ("all",))

    p = sub.add_parser("synth", help="write a synthetic stereo dataset")
    _common(p)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--height", type=int, default=32, help="LR height")
    p.add_argument("--width", type=int, default=96, help="LR width")
    p.add_argument("--profile", default="constant:2", help="constant:D | block:BG:FG | gradient:T:B")
    return parser


# ---------------------------------------------------------------- config assembly

def configs(args) -> tuple[net.NetworkConfig, tr.TrainConfig]:
    base_net = tr.DESK_NETWORK if args.desk else net.NetworkConfig()
    base_train = tr.DESK_TRAIN if args.desk else tr.TrainConfig()
    kv = {}
    if args.config is not None:
        kv.update(net.parse_kv(args.config.read_text()))
        unknown = set(kv) - NET_KEYS - TRAIN_KEYS
        if unknown:
            raise CliError(f"{args.config}: unknown keys {', '.join(sorted(unknown))}")
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            kv[key] = v
    for flag in net.ABLATION_FLAGS + ("global_skip", "replicated"):
        if getattr(args, flag, None):
            kv[flag] = True
    net_kv = {**_as_mapping(base_net), **{k: v for k, v in kv.items() if k in NET_KEYS}}
    train_kv = {**_as_mapping(base_train), **{k: v for k, v in kv.items() if k in TRAIN_KEYS}}
    return net.NetworkConfig.from_mapping(net_kv), tr.TrainConfig.from_mapping(train_kv)


def _as_mapping(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def run_dir(out_dir: Path, command: str, tag: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    d = out_dir / f"{command}-{tag}-{stamp}"
    n = 1
    while d.exists():
        d = out_dir / f"{command}-{tag}-{stamp}.{n}"
        n += 1
    d.mkdir(parents=True)
    return d


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    ncfg, tcfg = configs(args)
    out = run_dir(args.out_dir, "train", tr.config_hash(ncfg, tcfg, str(args.manifest or "")))
    (out / "network.cfg").write_text(ncfg.to_text())
    res = tr.train(ncfg, tcfg, out, manifest=args.manifest, resume=args.resume)
    val_rows = tr.read_log(out / "val.tsv")
    plotting.training_curves(tr.read_log(res.log), out / "training.png", val_rows=val_rows)
    f = res.final
    print(f"run\t{out}")
    print("psnr\tssim\tbicubic_psnr\tattention_mass")
    print(f"{f['psnr']:.4f}\t{f['ssim']:.4f}\t{f['bicubic_psnr']:.4f}\t{f['attention_mass']:.4f}")
    return 0


def _load(ckpt: Path, scale: int | None):
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    params, config = net.load_model(ckpt)
    if scale is not None and scale != config.scale:
        raise CliError(f"checkpoint is x{config.scale}, --scale {scale} requested")
    return params, config


def cmd_eval(args) -> int:
    if args.manifest is None:
        raise CliError("eval needs --manifest")
    if (args.ckpt is None) == (args.pred_manifest is None):
        raise CliError("eval needs exactly one of --ckpt and --pred-manifest")
    entries = data.read_manifest(args.manifest)
    if args.ckpt is not None:
        params, config = _load(args.ckpt, args.scale)
        scale, tag = config.scale, args.ckpt.stem
    else:
        preds = data.read_manifest(args.pred_manifest)
        if len(preds) != len(entries):
            raise CliError(f"{len(preds)} predictions for {len(entries)} references")
        scale, tag = args.scale or 2, "pred"
    ecfg = metrics.EvalConfig(border_crop=scale, quantized=args.quantized)
    out = run_dir(args.out_dir, "eval", tag)
    lines = ["image\tpsnr\tssim"]
    ps, ss = [], []
    for n, entry in enumerate(entries):
        if args.ckpt is not None:
            smp = data.load_entry(entry, scale)
            res = tr.super_resolve(params, config, smp.left_lr[None], smp.right_lr[None])
            pred, ref = res["sr"].data[0], smp.left_hr
        else:
            pred, ref = data.load_image(preds[n].left), data.load_image(entry.left)
        ps.append(metrics.psnr(pred, ref, ecfg))
        ss.append(metrics.ssim(pred, ref, ecfg))
        lines.append(f"{entry.left.name}\t{ps[-1]:.4f}\t{ss[-1]:.6f}")
    lines.append(f"mean\t{np.mean(ps):.4f}\t{np.mean(ss):.6f}")
    text = "\n".join(lines) + "\n"
    (out / "eval.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_sr(args) -> int:
    params, config = _load(args.ckpt, args.scale)
    left, right = data.load_image(args.left), data.load_image(args.right)
    if left.shape != right.shape:
        raise CliError(f"left {left.shape[:2]} and right {right.shape[:2]} differ in size")
    res = tr.super_resolve(params, config, left[None], right[None])
    data.save_image(args.out, res["sr"].data[0])
    print(args.out)
    return 0


def cmd_inspect(args) -> int:
    params, config = _load(args.ckpt, args.scale)
    if not config.uses_pam:
        raise CliError("checkpoint has no attention module")
    D = None
    if args.left is not None:
        if args.right is None:
            raise CliError("--left needs --right")
        left, right = data.load_image(args.left), data.load_image(args.right)
    else:
        seed = args.seed if args.seed is not None else 0
        smp = data.synth_stereo(seed, 32, 96, data.parse_profile(args.profile), config.scale)
        left, right, D = smp.left_lr, smp.right_lr, smp.disparity
    H, W = left.shape[:2]
    if not 0 <= args.row < H:
        raise CliError(f"--row {args.row} outside [0, {H})")
    res = tr.super_resolve(params, config, left[None], right[None])
    M = res["M_r2l"].data[0]
    V_l2r, V_r2l = res["V_l2r"][0], res["V_r2l"][0]
    disp = pam.expected_disparity(M)
    out = run_dir(args.out_dir, "inspect", f"{args.ckpt.stem}-row{args.row}")
    sl = M[args.row]
    data.save_gray(out / f"attention_row{args.row}.png", sl / max(float(sl.max()), 1e-12))
    data.save_gray(out / "valid_l2r.png", V_l2r.astype(float))
    data.save_gray(out / "valid_r2l.png", V_r2l.astype(float))
    np.savetxt(out / "expected_disparity.tsv", disp, fmt="%.4f", delimiter="\t")
    span = max(float(disp.max()), 1e-12)
    data.save_gray(out / "expected_disparity.png", np.clip(disp / span, 0, 1))
    plotting.attention_panel(left, right, M, V_l2r, V_r2l, disp, args.row, out / "attention.png")
    lines = ["quantity\tvalue", f"valid_l2r_fraction\t{V_l2r.mean():.4f}",
             f"valid_r2l_fraction\t{V_r2l.mean():.4f}", f"mean_expected_disparity\t{disp.mean():.4f}"]
    if D is not None:
        gt = pam.gt_attention_from_disparity(D, "r2l")
        vis = D.visible()
        lines.append(f"attention_mass_at_gt\t{pam.attention_at(M, gt)[vis].mean():.4f}")
        lines.append(f"disparity_mae\t{np.abs(disp - D.values)[vis].mean():.4f}")
    text = "\n".join(lines) + "\n"
    (out / "summary.tsv").write_text(text)
    sys.stdout.write(f"run\t{out}\n" + text)
    return 0


def cmd_ablate(args) -> int:
    ncfg, tcfg = configs(args)
    out = run_dir(args.out_dir, f"ablate-{args.axis}", tr.config_hash(ncfg, tcfg))
    rows = tr.ablate(args.axis, ncfg, tcfg, out)
    report = tr.format_report(rows)
    (out / "report.tsv").write_text(report)
    plotting.ablation_bars(rows, out / "psnr.png", "psnr")
    plotting.ablation_bars(rows, out / "attention_mass.png", "attention_mass")
    sys.stdout.write(f"run\t{out}\n" + report)
    return 0


def cmd_synth(args) -> int:
    scale = args.scale or 2
    seed = args.seed if args.seed is not None else 0
    profile = data.parse_profile(args.profile)
    tag = f"x{scale}-s{seed}-n{args.count}"
    out = run_dir(args.out_dir, "synth", tag)
    manifest = data.write_synthetic_dataset(out, args.count, args.height, args.width, scale, seed, profile)
    print(manifest)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sr": cmd_sr, "inspect": cmd_inspect,
            "ablate": cmd_ablate, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, ValueError, OSError, KeyError) as e:
        msg = str(e).strip().splitlines()[0] if str(e).strip() else type(e).__name__
        print(f"passr {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
