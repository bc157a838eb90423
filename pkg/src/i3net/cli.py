"""``i3net`` command line.

Exit codes: 0 success, 2 configuration or validation error, 3 runtime or
numerical error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import analysis
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigValidationError, parse_config
from .evaluation import baseline_interp, evaluate
from .model import ConfigError, I3Net, ModelConfig, synthesize_volume
from .nnops import ShapeError
from .train import TrainingDiverged, deterministic_requested, set_deterministic, train_loop
from .volformat import (
    IntensityDomain,
    PersistenceError,
    PhantomSpec,
    ValidationError,
    Volume,
    VolumeFormatError,
    gen_phantom,
    normalize_intensity,
    read_volume,
    write_volume,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("i3net")


def _dims(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected dimensions like 4x256x256, got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    try:
        return k, json.loads(v)
    except ValueError:
        return k, v


def _load_dir(path) -> tuple[list[Volume], list[str]]:
    files = sorted(Path(path).glob("*.rvl"))
    if not files:
        raise FileNotFoundError(f"no .rvl volumes in {path}")
    return [read_volume(f) for f in files], [f.stem for f in files]


def _normalized(v: Volume, lo=-1024.0, hi=3071.0) -> Volume:
    return normalize_intensity(v, lo, hi) if v.intensity_domain == IntensityDomain.RAW_HU else v


def _snapshot(path, payload: dict) -> None:
    Path(str(path) + ".config.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _phantoms(n, seed0, size, lo, hi):
    return [_normalized(gen_phantom(PhantomSpec(seed=seed0 + i, size=tuple(size))), lo, hi) for i in range(n)]


# Subcommands -----------------------------------------------------------------


def cmd_gen_phantom(args) -> int:
    spec = PhantomSpec(
        seed=args.seed,
        size=args.size,
        n_ellipsoids=args.n_ellipsoids,
        n_tubes=args.n_tubes,
        background_smoothness=args.smoothness,
    )
    v = gen_phantom(spec)
    if args.normalize:
        v = normalize_intensity(v)
    write_volume(v, args.out)
    _snapshot(args.out, {"command": "gen-phantom", "seed": args.seed, "size": list(args.size),
                         "n_ellipsoids": args.n_ellipsoids, "n_tubes": args.n_tubes,
                         "smoothness": args.smoothness, "normalize": args.normalize})
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = dict(args.set or [])
    for key in ("seed", "epochs", "batch_size", "lr0", "workers"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.deterministic or deterministic_requested():
        overrides["deterministic"] = True
    cfg = parse_config(args.config, overrides)
    if cfg.deterministic:
        set_deterministic(True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_snapshot(out / "config.resolved.json")

    if cfg.train_dir:
        train_vols = [_normalized(v, cfg.hu_lo, cfg.hu_hi) for v in _load_dir(cfg.train_dir)[0]]
    else:
        train_vols = _phantoms(cfg.n_train_phantoms, cfg.phantom_seed, cfg.phantom_size, cfg.hu_lo, cfg.hu_hi)
    if cfg.val_dir:
        val_vols = [_normalized(v, cfg.hu_lo, cfg.hu_hi) for v in _load_dir(cfg.val_dir)[0]]
    else:
        val_vols = _phantoms(cfg.n_val_phantoms, cfg.phantom_seed + 10**6, cfg.phantom_size, cfg.hu_lo, cfg.hu_hi)

    model = I3Net(cfg.model_config(), seed=cfg.seed)
    model, state = train_loop(model, train_vols, cfg.train_config(), val_volumes=val_vols or None, out_dir=out)
    (out / "history.json").write_text(
        json.dumps({"loss": state.history, "val": state.val_history}, sort_keys=True) + "\n"
    )
    last = state.history[-1]["loss"] if state.history else float("nan")
    print(f"trained {state.step} steps, final loss {last:.6f}; checkpoint {out / 'last.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    deterministic = args.deterministic or deterministic_requested()
    if deterministic:
        set_deterministic(True)
    model, _ = load_checkpoint(args.checkpoint)
    if model.config.R != args.scale:
        raise ValidationError(f"checkpoint was trained for R={model.config.R}, --scale is {args.scale}")
    vols, names = _load_dir(args.data)
    vols = [_normalized(v) for v in vols]
    methods = [("i3net", lambda lr: synthesize_volume(lr, model))]
    for kind in args.baselines:
        methods.append((kind, lambda lr, kind=kind: baseline_interp(lr, args.scale, kind)))
    report = evaluate(methods, vols, args.scale, names=names, repeats=args.repeats, warmup=args.warmup,
                      deterministic=deterministic, fingerprint_data={"model": model.config.to_json()})
    report.write(args.report, args.csv)
    _snapshot(args.report, {"command": "eval", "checkpoint": str(args.checkpoint), "data": str(args.data),
                            "scale": args.scale, "baselines": args.baselines, "deterministic": deterministic})
    for name, agg in report.aggregates.items():
        print(f"{name:10s} PSNR {agg['psnr_mean']}  SSIM_a {agg['ssim_a_mean']}")
    return EXIT_OK


def cmd_synth(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    if model.config.R != args.scale:
        raise ValidationError(f"checkpoint was trained for R={model.config.R}, --scale is {args.scale}")
    lr = read_volume(args.inp)
    raw = lr.intensity_domain == IntensityDomain.RAW_HU
    info = {}
    out = synthesize_volume(_normalized(lr, args.hu_lo, args.hu_hi), model, info=info)
    if raw:
        data = out.data.astype(np.float64) * (args.hu_hi - args.hu_lo) + args.hu_lo
        data[:: args.scale] = lr.data
        out = Volume(data.astype(np.float32), out.spacing, IntensityDomain.RAW_HU)
    write_volume(out, args.out)
    _snapshot(args.out, {"command": "synth", "checkpoint": str(args.checkpoint), "in": str(args.inp),
                         "scale": args.scale, "info": {k: list(v) if isinstance(v, tuple) else v for k, v in info.items()}})
    if info.get("replicated_slices"):
        log.warning("input had fewer than S_in slices; %d edge slices replicated", info["replicated_slices"])
    return EXIT_OK


def _probe_input(args, model: I3Net) -> torch.Tensor:
    cfg = model.config
    if args.data:
        v = _normalized(read_volume(args.data))
        x = torch.from_numpy(v.data[: cfg.S_in].copy())[None]
    else:
        rng = np.random.default_rng(args.seed)
        x = torch.from_numpy(rng.random((1, cfg.S_in, 64, 64), dtype=np.float32))
    return x


def cmd_analyze(args) -> int:
    result: dict
    if args.probe == "hu-window":
        if not args.data:
            raise ValidationError("hu-window needs --data VOLUME")
        v = read_volume(args.data)
        img = analysis.hu_window(v, args.lo, args.hi)
        np.save(args.out, img)
        result = {"probe": "hu-window", "lo": args.lo, "hi": args.hi, "shape": list(img.shape)}
        _snapshot(args.out, result)
        return EXIT_OK
    if not args.checkpoint:
        raise ValidationError(f"{args.probe} needs --checkpoint")
    model, _ = load_checkpoint(args.checkpoint)
    x = _probe_input(args, model)
    if args.probe == "freq-energy":
        taps = analysis.block_taps(model, x)
        rhos = args.rhos
        result = {"probe": "freq-energy", "rhos": rhos, "blocks": []}
        for k, rec in enumerate(taps):
            result["blocks"].append({name: analysis.energy_curve(t, rhos) for name, t in rec.items()})
        h, w = x.shape[-2:]
        result["uniform"] = analysis.uniform_curve(h, w, rhos)
        if args.csv and taps:
            analysis.write_curve_csv(args.csv, result["blocks"][-1]["output"], result["uniform"])
    elif args.probe == "redundancy":
        result = {"probe": "redundancy", "per_block": analysis.stage_redundancy(model, x)}
        if args.csv:
            with open(args.csv, "w") as fh:
                fh.write("block,redundancy\n")
                for k, r in enumerate(result["per_block"], 1):
                    fh.write(f"{k},{r:.9g}\n")
    elif args.probe == "receptive":
        module = {"inter": lambda b: b.inter, "intra": lambda b: b.intra, "block": lambda b: b}[args.module](
            model.i2blocks()[0]
        )
        if module is None:
            raise ValidationError(f"model has no {args.module} branch")
        shape = (1, model.config.C, args.size, args.size)
        sal = analysis.receptive_probe(module, shape)
        result = {"probe": "receptive", "module": args.module, "support": list(analysis.support_box(sal))}
        if args.csv:
            np.savetxt(args.csv, sal, delimiter=",", fmt="%.9g")
    else:  # pragma: no cover - argparse restricts choices
        raise ValidationError(args.probe)
    text = json.dumps(result, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        _snapshot(args.out, {"command": "analyze", "probe": args.probe, "checkpoint": str(args.checkpoint)})
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        cfg = model.config
        if cfg.R != args.scale:
            # timing depends on shapes only; rebuild with the requested factor
            log.warning("checkpoint R=%d differs from --scale %d; timing a re-initialised tail", cfg.R, args.scale)
            model = I3Net(dataclasses.replace(cfg, R=args.scale), seed=0)
    else:
        model = I3Net(ModelConfig.desk(R=args.scale), seed=0)
    if len(args.shape) != 3 or args.shape[0] != model.config.S_in:
        raise ValidationError(f"--shape must be {model.config.S_in}xHxW, got {'x'.join(map(str, args.shape))}")
    result = analysis.bench_latency(model, tuple(args.shape), repeats=args.repeats, warmup=args.warmup)
    text = json.dumps(result, sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        _snapshot(args.out, {"command": "bench", "checkpoint": args.checkpoint, "shape": list(args.shape),
                             "scale": args.scale, "repeats": args.repeats, "warmup": args.warmup,
                             "model": json.loads(model.config.to_json())})
    print(f"{args.shape[0]} -> {result['output_shape'][0]} slices (R={args.scale}): median {result['median_ms']:.1f} ms")
    return EXIT_OK


# Parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="i3net", description="Axial slice interpolation for anisotropic volumes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-phantom", help="write a synthetic CT phantom", description="Write a synthetic CT phantom in RVL1 format.")
    p.add_argument("--seed", type=int, required=True, help="phantom seed")
    p.add_argument("--size", type=_dims, default=(19, 64, 64), help="volume size SxHxW (default 19x64x64)")
    p.add_argument("--out", required=True, help="output RVL1 path")
    p.add_argument("--n-ellipsoids", type=int, default=6, help="number of organ-like ellipsoids")
    p.add_argument("--n-tubes", type=int, default=4, help="number of vessel-like tubes")
    p.add_argument("--smoothness", type=float, default=6.0, help="background correlation length in voxels (inf = flat)")
    p.add_argument("--normalize", action="store_true", help="store [0, 1] intensities instead of HU")
    p.set_defaults(func=cmd_gen_phantom)

    p = sub.add_parser("train", help="train a model", description="Train a model from a JSON run configuration.")
    p.add_argument("--config", help="run configuration JSON (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--deterministic", action="store_true", help="deterministic kernels (also I3NET_DETERMINISTIC=1)")
    p.add_argument("--out", default="runs/latest", help="output directory for checkpoints and history")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="override the configured batch size")
    p.add_argument("--lr0", type=float, help="override the initial learning rate")
    p.add_argument("--workers", type=int, help="patch-sampling worker threads")
    p.add_argument("--set", type=_kv, action="append", metavar="KEY=VALUE", help="override any configuration key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint and baselines", description="Evaluate a checkpoint against classical baselines.")
    p.add_argument("--checkpoint", required=True, help="checkpoint archive")
    p.add_argument("--data", required=True, help="directory of HR RVL1 volumes")
    p.add_argument("--scale", type=int, required=True, help="axial decimation factor R")
    p.add_argument("--report", required=True, help="output JSON report path")
    p.add_argument("--baselines", type=lambda s: [k for k in s.split(",") if k], default=["nearest", "linear", "cubic"],
                   help="comma-separated baseline kinds (nearest, linear, cubic)")
    p.add_argument("--csv", help="optional CSV summary path")
    p.add_argument("--repeats", type=int, default=10, help="timed repetitions per method and volume")
    p.add_argument("--warmup", type=int, default=3, help="untimed warm-up calls")
    p.add_argument("--deterministic", action="store_true", help="omit wall-clock fields (also I3NET_DETERMINISTIC=1)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="interpolate a volume", description="Interpolate an LR volume with a checkpoint.")
    p.add_argument("--checkpoint", required=True, help="checkpoint archive")
    p.add_argument("--in", dest="inp", required=True, help="input LR RVL1 volume")
    p.add_argument("--scale", type=int, required=True, help="axial upsampling factor R")
    p.add_argument("--out", required=True, help="output RVL1 volume")
    p.add_argument("--hu-lo", type=float, default=-1024.0, help="HU mapped to 0 when the input is raw HU")
    p.add_argument("--hu-hi", type=float, default=3071.0, help="HU mapped to 1 when the input is raw HU")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("analyze", help="run a diagnostic probe", description="Frequency, redundancy, receptive-field and HU-window probes.")
    p.add_argument("probe", choices=["freq-energy", "redundancy", "receptive", "hu-window"], help="probe to run")
    p.add_argument("--checkpoint", help="checkpoint archive (not needed for hu-window)")
    p.add_argument("--data", help="input RVL1 volume (random probe input when omitted)")
    p.add_argument("--out", help="output path (JSON, or .npy for hu-window); stdout when omitted")
    p.add_argument("--csv", help="optional CSV output")
    p.add_argument("--rhos", type=_floats, default=[0.1 * k for k in range(1, 11)], help="comma-separated high-frequency ratios")
    p.add_argument("--module", choices=["inter", "intra", "block"], default="intra", help="module probed by 'receptive'")
    p.add_argument("--size", type=int, default=64, help="probe plane size for 'receptive'")
    p.add_argument("--lo", type=float, default=-125.0, help="HU window lower bound")
    p.add_argument("--hi", type=float, default=275.0, help="HU window upper bound")
    p.add_argument("--seed", type=int, default=0, help="seed of the random probe input")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="measure inference latency", description="Median synthesis latency after warm-up.")
    p.add_argument("--checkpoint", help="checkpoint archive (fresh desk model when omitted)")
    p.add_argument("--shape", type=_dims, default=(4, 256, 256), help="LR input shape SxHxW")
    p.add_argument("--scale", type=int, default=6, help="axial upsampling factor R")
    p.add_argument("--repeats", type=int, default=10, help="timed repetitions")
    p.add_argument("--warmup", type=int, default=3, help="untimed warm-up runs")
    p.add_argument("--out", help="optional JSON output path")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if deterministic_requested():
        set_deterministic(True)
    try:
        return args.func(args)
    except (ConfigValidationError, ConfigError, ValidationError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VolumeFormatError, CheckpointError, PersistenceError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, RuntimeError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
