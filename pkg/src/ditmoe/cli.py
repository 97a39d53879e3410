"""Command line: train, sample, analyze, count-params, validate-config.

Exit codes: 0 success, 1 config-validation failure, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .analytics import (analyze_usage, concat_tables, read_traces,
                        trace_table, write_report, write_traces)
from .config import (ConfigError, config_from_dict, count_parameters,
                     resolve_config, validate_config)
from .flow import SamplerConfig, sample
from .model import DiTMoE
from .training import apply_ema, run_training
from .checkpoint import load_checkpoint

__all__ = ["main", "to_ppm_bytes", "write_ppm"]


def to_ppm_bytes(image: np.ndarray) -> bytes:
    """Encode one (3, H, W) float image in [-1, 1] as binary PPM:
    maxval 255, pixel value round((x + 1) / 2 * 255)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"PPM needs a (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    levels = np.clip((image + 1.0) * 0.5, 0.0, 1.0) * 255.0
    pixels = np.rint(levels).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes()


def write_ppm(image: np.ndarray, path):
    Path(path).write_bytes(to_ppm_bytes(image))


def _apply_overrides(cf, pe, ablation):
    if pe:
        cf.model.pe_mode = pe
    if ablation == "s0a3":
        _, routed, _ = cf.model.expert_counts()
        cf.model.expert_spec = f"S0E{routed}A3"
    elif ablation == "no-interleave":
        cf.model.interleave = False
    elif ablation == "gqa":
        cf.model.gqa_kv_heads = max(cf.model.heads // 2, 1)
    return cf


def _human(n: int) -> str:
    if n >= 1_000_000_000:
        return f"{n / 1e9:.2f}B"
    if n >= 1_000_000:
        return f"{n / 1e6:.1f}M"
    return f"{n / 1e3:.1f}K"


def cmd_train(args) -> int:
    cf = _apply_overrides(resolve_config(args.config), args.pe, args.ablation)
    if args.seed is not None:
        cf.train["seed"] = args.seed
    summary = run_training(cf, args.out, resume=args.checkpoint,
                           steps_override=args.steps)
    losses = summary["losses"]
    if losses:
        print(f"trained {len(losses)} steps; final loss {losses[-1]:.6f}")
    else:
        print("checkpoint already at the configured step count; nothing to do")
    print(f"metrics: {summary['metrics']}")
    print(f"checkpoint: {summary['checkpoint']}")
    return 0


def cmd_sample(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    cf = resolve_config(args.config) if args.config else config_from_dict(bundle.config)
    model = DiTMoE(cf.model, seed=0)
    model.load_state(bundle.weights)
    apply_ema(model, bundle.ema)

    sampler = SamplerConfig(solver=args.solver, steps=args.ode_steps,
                            cfg_scale=args.cfg_scale,
                            cfg_interval=args.cfg_interval)
    rng = np.random.default_rng([args.seed, 2])
    n = args.num_samples
    if args.cls is not None:
        if not 0 <= args.cls < cf.model.num_classes:
            raise ValueError(f"--class {args.cls} outside "
                             f"[0, {cf.model.num_classes})")
        labels = np.full(n, args.cls, dtype=np.int64)
    else:
        labels = rng.integers(0, cf.model.num_classes, n)

    collector: list = []
    images = sample(model, labels, sampler, rng, collector=collector)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, image in enumerate(images):
        name = f"sample_{i:03d}.ppm"
        write_ppm(image, out / name)
        files.append(name)
    write_traces(trace_table(collector), out / "traces.csv")

    manifest = {
        "files": files,
        "classes": [int(c) for c in labels],
        "solver": sampler.solver,
        "ode_steps": sampler.steps,
        "cfg_scale": sampler.cfg_scale,
        "cfg_interval": list(sampler.cfg_interval) if sampler.cfg_interval else None,
        "seed": args.seed,
        "checkpoint": str(args.checkpoint),
        "config_name": cf.name,
        "traces": "traces.csv",
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(files)} samples + traces to {out}")
    return 0


def cmd_analyze(args) -> int:
    tables = [read_traces(p) for p in args.traces]
    report = analyze_usage(concat_tables(tables))
    a_path, b_path = write_report(report, args.out)
    print(f"per-class usage: {a_path}")
    print(f"per-expert usage: {b_path}")
    for flag in report.flags:
        print(f"flag: {flag}")
    return 0


def cmd_count_params(args) -> int:
    cf = _apply_overrides(resolve_config(args.config), args.pe, args.ablation)
    total, activated = count_parameters(cf.model)
    name = cf.name or args.config
    print(f"{name}  total {_human(total)} ({total})  "
          f"activated {_human(activated)} ({activated})")
    return 0


def cmd_validate(args) -> int:
    cf = _apply_overrides(resolve_config(args.config), args.pe, args.ablation)
    problems = validate_config(cf.model)
    name = cf.name or args.config
    if problems:
        for p in problems:
            print(f"{name}: {p}")
        return 1
    total, activated = count_parameters(cf.model)
    print(f"{name}: ok ({_human(total)} params, {_human(activated)} activated)")
    return 0


def _interval(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected LO,HI")
    return float(parts[0]), float(parts[1])


def _add_model_overrides(p):
    p.add_argument("--pe", choices=["ape", "rope1d", "rope2d"],
                   help="override the positional-encoding mode")
    p.add_argument("--ablation", choices=["s0a3", "no-interleave", "gqa"],
                   help="apply one of the standard ablations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ditmoe",
        description="Sparse-MoE diffusion transformer: training, sampling, "
                    "and routing analytics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    p.add_argument("--config", required=True,
                   help="preset name or config JSON path")
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    _add_model_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample images from a checkpoint "
                                      "(EMA weights) and record routing traces")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="override the checkpoint's stored config")
    p.add_argument("--out", default="samples", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--cfg-interval", type=_interval, metavar="LO,HI")
    p.add_argument("--solver", choices=["euler", "heun"], default="heun")
    p.add_argument("--ode-steps", type=int, default=50)
    p.add_argument("--class", dest="cls", type=int,
                   help="sample this class only (default: random classes)")
    p.add_argument("--num-samples", type=int, default=4)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("analyze", help="aggregate routing traces into "
                                       "expert-usage CSVs")
    p.add_argument("traces", nargs="+", help="trace CSV files")
    p.add_argument("--out", default="analysis", help="output directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("count-params", help="print total/activated parameters")
    p.add_argument("--config", required=True)
    _add_model_overrides(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("validate-config", help="check a config's invariants")
    p.add_argument("--config", required=True)
    _add_model_overrides(p)
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failures map to exit code 2
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
