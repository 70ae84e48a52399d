"""``tvsr`` command line: prepare, train, eval, profile, ablate.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import dataio
from .dataio import DatasetManifest, DegradationSpec, ManifestEntry
from .models import ModelSpec, Variant, build_model, layer_inventory, load_checkpoint
from .training import AblationConfig, DivergenceError, TrainSpec

log = logging.getLogger("tvsr")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

MODEL_KEYS = ("variant", "blocks", "channels", "scale", "temporal_radius", "residual_hidden")
DEGRADATION_KEYS = ("sigma", "kernel_size")  # scale is shared with the model


class UsageError(Exception):
    pass


def device() -> torch.device:
    return torch.device(os.environ.get("TVSR_DEVICE", "cpu"))


def read_config(path) -> dict[str, str]:
    """Key-value text: ``key = value`` per line, ``#`` comments."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{p}: config file not found")
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def write_run_config(out_dir: Path, command: str, config: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_config.txt"
    lines = [f"# tvsr {command}"] + [f"{k} = {v}" for k, v in config.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def merge(defaults: dict, config: dict, flags: dict) -> dict:
    """Later sources win; a flag that overrides a config-file value is logged."""
    out = dict(defaults)
    out.update(config)
    for k, v in flags.items():
        if v is None:
            continue
        if k in config and str(config[k]) != str(v):
            log.warning("flag --%s=%s overrides config value %s", k.replace("_", "-"), v, config[k])
        out[k] = v
    return out


def _bool(v) -> bool:
    return str(v).strip().lower() in ("1", "true", "yes", "on")


def model_spec_from(d: dict) -> ModelSpec:
    return ModelSpec(Variant.parse(d["variant"]), int(d["blocks"]), int(d.get("channels", 128)),
                     int(d.get("scale", 4)), int(d.get("temporal_radius", 3)),
                     _bool(d.get("residual_hidden", True)))


# --- prepare -----------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    if not in_dir.is_dir():
        raise UsageError(f"{in_dir}: input directory does not exist")
    deg = DegradationSpec(args.sigma, args.scale, args.kernel_size)
    config = {"command": "prepare", "in_dir": str(in_dir.resolve()), "split": args.split,
              **deg.to_dict(), "seed": args.seed}
    cfg_path, manifest_path = out_dir / "run_config.txt", out_dir / "manifest.txt"
    expected = "\n".join(["# tvsr prepare"] + [f"{k} = {v}" for k, v in config.items()]) + "\n"
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        if manifest_path.is_file() and cfg_path.is_file() and cfg_path.read_text() == expected:
            print(f"{out_dir}: up to date")
            return EXIT_OK
        raise UsageError(f"{out_dir}: holds output from a different or unfinished run; use --force to overwrite")
    if manifest_path.exists():
        manifest_path.unlink()
    write_run_config(out_dir, "prepare", config)
    sequences = list(dataio.scan_sequences(in_dir))
    if not sequences:
        raise UsageError(f"{in_dir}: no PNG sequences found")
    entries = []
    for name, d in sequences:
        hr = dataio.load_sequence(d)
        h, w = hr.shape[1:3]
        hr = hr[:, : h - h % deg.scale, : w - w % deg.scale]
        lr = dataio.degrade_sequence(hr, deg)
        dataio.save_sequence(hr, out_dir / "hr" / name)
        dataio.save_sequence(lr, out_dir / "lr" / name)
        entries.append(ManifestEntry(f"hr/{name}", len(hr), args.split))
        log.info("prepared %s (%d frames, %dx%d)", name, len(hr), hr.shape[2], hr.shape[1])
    DatasetManifest(entries, deg).write(manifest_path)
    print(f"wrote {len(entries)} sequences and {manifest_path}")
    return EXIT_OK


# --- train -------------------------------------------------------------------------------

def cmd_train(args) -> int:
    file_cfg = read_config(args.config) if args.config else {}
    flags = {k: getattr(args, k) for k in (*MODEL_KEYS, *DEGRADATION_KEYS, *_train_keys(), "manifest", "out_dir")}
    variant = flags["variant"] or file_cfg.get("variant") or "rrn"
    defaults = {"variant": variant, "blocks": 10, "channels": 128, "scale": 4, "temporal_radius": 3,
                "residual_hidden": True, "sigma": 1.6, "kernel_size": 13, "out_dir": "runs/train",
                **TrainSpec.for_variant(variant).to_dict()}
    cfg = merge(defaults, file_cfg, flags)
    mspec = model_spec_from(cfg)
    tspec = TrainSpec.from_dict({k: cfg[k] for k in _train_keys() if k in cfg})
    deg = DegradationSpec(float(cfg["sigma"]), mspec.scale, int(cfg["kernel_size"]))

    if args.dry_run:
        for k, v in cfg.items():
            print(f"{k} = {v}")
        print("# layer inventory")
        for l in layer_inventory(mspec):
            print(f"{l.name}\t{l.kind}\t{l.in_channels}->{l.out_channels}\t{'x'.join(map(str, l.kernel))}")
        return EXIT_OK

    if not cfg.get("manifest"):
        raise UsageError("train needs --manifest (or manifest = ... in the config)")
    out_dir = Path(cfg["out_dir"])
    write_run_config(out_dir, "train", cfg)
    manifest = DatasetManifest.read(cfg["manifest"])
    manifest.degradation = deg
    manifest.validate()
    torch.manual_seed(tspec.seed)
    model = build_model(mspec, tspec.seed).to(device())
    from .training import train

    try:
        res = train(model, manifest, tspec, out_dir=out_dir, resume=args.resume)
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {res.state.global_step} steps; final loss {res.losses[-1] if res.losses else float('nan'):.6g}; "
          f"checkpoint {out_dir / 'last.ckpt'}")
    return EXIT_OK


def _train_keys():
    return tuple(f.name for f in fields(TrainSpec))


# --- eval ----------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .metrics import EvalProtocol, evaluate, temporal_profile, write_curve_tsv

    if args.checkpoint is None and not args.bicubic:
        raise UsageError("eval needs --checkpoint or --bicubic")
    if args.checkpoint is not None and not Path(args.checkpoint).is_file():
        raise UsageError(f"{args.checkpoint}: checkpoint not found")
    manifest = DatasetManifest.read(args.manifest)
    if args.sigma is not None or args.kernel_size is not None:
        d = manifest.degradation
        manifest.degradation = DegradationSpec(args.sigma or d.sigma, d.scale, args.kernel_size or d.kernel_size)
    channels = tuple(c.strip().lower() for c in args.channels.split(",") if c.strip())
    if not set(channels) <= {"y", "rgb"} or not channels:
        raise UsageError(f"--channels must list y and/or rgb, got {args.channels!r}")
    protocol = EvalProtocol(args.border, args.skip_frames, channels)
    out_dir = Path(args.out_dir)
    write_run_config(out_dir, "eval", {"checkpoint": args.checkpoint or "bicubic", "manifest": args.manifest,
                                        **manifest.degradation.to_dict(), "border": args.border,
                                        "skip_frames": args.skip_frames, "channels": ",".join(channels),
                                        "profile_row": args.profile_row, "split": args.split})
    model = None
    if args.checkpoint is not None:
        model, _, _ = load_checkpoint(args.checkpoint)
        model = model.to(device()).eval()
        if model.spec.scale != manifest.degradation.scale:
            raise UsageError(f"checkpoint scale {model.spec.scale} != manifest scale {manifest.degradation.scale}")
    outputs: dict = {}
    report = evaluate(model, manifest, protocol, split=args.split, outputs=outputs)
    (out_dir / "report.tsv").write_text(report.to_tsv())
    (out_dir / "report.txt").write_text(report.to_table())
    print(report.to_table(), end="")
    gts = {e.path: e for e in manifest.entries}
    for s in report.sequences:
        safe = s.name.replace("/", "_")
        write_curve_tsv(s.psnr_y_per_frame, out_dir / f"psnr_over_time_{safe}.tsv")
        if args.profile_row is not None:
            pred = np.clip(outputs[s.name], 0, 1)
            row = args.profile_row
            if row >= pred.shape[1]:
                raise UsageError(f"--profile-row {row} outside sequence {s.name} of height {pred.shape[1]}")
            temporal_profile(pred, row).save_png(out_dir / f"profile_{safe}_row{row}.png")
            gt = manifest.load(gts[s.name])
            temporal_profile(gt[:, : pred.shape[1], : pred.shape[2]], row).save_png(
                out_dir / f"profile_{safe}_row{row}_gt.png")
        if args.save_frames:
            dataio.save_sequence(np.clip(outputs[s.name], 0, 1), out_dir / "frames" / safe)
    return EXIT_OK


# --- profile -------------------------------------------------------------------------------

def _parse_size(s: str) -> tuple[int, int]:
    try:
        w, h = (int(x) for x in s.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like 320x180, got {s!r}")
    return w, h


def cmd_profile(args) -> int:
    from .profiling import profile, profile_table

    w, h = _parse_size(args.size)
    if args.all:
        specs = [ModelSpec(v, k, args.channels, args.scale) for k in (5, 10)
                 for v in (Variant.EARLY_2D, Variant.SLOW_3D, Variant.RRN)]
    else:
        specs = [ModelSpec(Variant.parse(args.variant), args.blocks, args.channels, args.scale)]
    out_dir = Path(args.out_dir)
    write_run_config(out_dir, "profile", {"variants": ",".join(f"{s.variant.value}:{s.blocks}" for s in specs),
                                           "channels": args.channels, "scale": args.scale, "size": f"{w}x{h}",
                                           "bench": args.bench, "warmup": args.warmup, "iters": args.iters})
    reports = [profile(s, h, w, args.bench, args.warmup, args.iters, device()) for s in specs]
    (out_dir / "profile.tsv").write_text(profile_table(reports, tsv=True))
    print(f"LR input {w}x{h}")
    print(profile_table(reports), end="")
    for r in reports:
        print(f"{r.spec.variant.value} K={r.spec.blocks}: params={r.params:,} gmacs={r.gmacs:.1f}")
    return EXIT_OK


# --- ablate -------------------------------------------------------------------------------

def _parse_blocks(s: str) -> list[int]:
    if ".." in s:
        a, b = s.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in s.split(",") if x.strip()]


def cmd_ablate(args) -> int:
    from .training import ablate_hidden_residual

    ks = _parse_blocks(args.blocks)
    cfg = AblationConfig(**{f.name: getattr(args, f.name) for f in fields(AblationConfig)
                            if getattr(args, f.name, None) is not None})
    out_dir = Path(args.out_dir)
    write_run_config(out_dir, "ablate", {"blocks": ",".join(map(str, ks)), **asdict(cfg)})
    report = ablate_hidden_residual(
        ks, cfg, progress=lambda r: log.info("K=%d residual=%s loss %.4g -> %.4g", r.blocks, r.residual,
                                             r.initial_loss, r.final_loss))
    (out_dir / "ablation.tsv").write_text(report.tsv())
    (out_dir / "table.txt").write_text(report.table() + "\n")
    print(report.table())
    print("∗: gradient vanishing (first-block gradient below "
          f"{cfg.vanish_ratio:g} of the output-bias gradient) or divergence")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tvsr", description="Temporal modelling toolkit for video super-resolution")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="degrade HR sequences into LR/HR pairs and write a manifest")
    sp.add_argument("in_dir")
    sp.add_argument("out_dir")
    sp.add_argument("--sigma", type=float, default=1.6)
    sp.add_argument("--scale", type=int, default=4)
    sp.add_argument("--kernel-size", type=int, default=13)
    sp.add_argument("--split", default="train")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train a model from a config file and/or flags")
    sp.add_argument("--config")
    sp.add_argument("--manifest")
    sp.add_argument("--out-dir")
    sp.add_argument("--resume")
    sp.add_argument("--dry-run", action="store_true")
    sp.add_argument("--variant")
    sp.add_argument("--blocks", type=int)
    sp.add_argument("--channels", type=int)
    sp.add_argument("--scale", type=int)
    sp.add_argument("--temporal-radius", type=int)
    sp.add_argument("--residual-hidden")
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--kernel-size", type=int)
    for f in fields(TrainSpec):
        sp.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="PSNR/SSIM evaluation on a manifest of ground-truth sequences")
    sp.add_argument("--checkpoint")
    sp.add_argument("--bicubic", action="store_true", help="evaluate plain bicubic upsampling")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out-dir", default="runs/eval")
    sp.add_argument("--border", type=int, default=8)
    sp.add_argument("--skip-frames", type=int, default=0)
    sp.add_argument("--channels", default="y,rgb")
    sp.add_argument("--profile-row", type=int)
    sp.add_argument("--split")
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--kernel-size", type=int)
    sp.add_argument("--save-frames", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("profile", help="parameter / GMAC table, optionally with measured runtime")
    sp.add_argument("--variant", default="rrn")
    sp.add_argument("--blocks", type=int, default=10)
    sp.add_argument("--channels", type=int, default=128)
    sp.add_argument("--scale", type=int, default=4)
    sp.add_argument("--size", default="320x180", help="LR input WIDTHxHEIGHT")
    sp.add_argument("--all", action="store_true", help="all three variants at 5 and 10 blocks")
    sp.add_argument("--bench", action="store_true")
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--iters", type=int, default=10)
    sp.add_argument("--out-dir", default="runs/profile")
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("ablate", help="hidden-state residual ablation at micro scale")
    sp.add_argument("--blocks", default="2..10")
    for f in fields(AblationConfig):
        sp.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default), default=None)
    sp.add_argument("--out-dir", default="runs/ablate")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
