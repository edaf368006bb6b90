"""Command-line interface.

Subcommands: generate, train, evaluate, cv, ablate, gradcheck,
export-attention. Configuration comes from a preset, optionally overlaid
with a JSON config file and then `--set key=value` flags. Every run that
writes an output also writes `<output>.manifest.json` recording the seed,
config hash, package versions and timing.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from .errors import ConfigError, MilbagError

DATA_DIR_ENV = "MILBAG_DATA_DIR"


def _default_data_dir():
    return os.environ.get(DATA_DIR_ENV)


def _load_config(preset: str, config_path: str | None, overrides: list[str]):
    from .train import TrainConfig, synthetic_defaults

    if preset == "paper":
        values = TrainConfig().to_dict()
    elif preset == "synthetic":
        values = synthetic_defaults().to_dict()
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {config_path}: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {config_path} must be a JSON object")
        unknown = set(loaded) - set(values)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        if key not in values:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(raw)
    try:
        return TrainConfig(**values)
    except TypeError as e:
        raise ConfigError(f"invalid config: {e}") from e


def _coerce(raw: str):
    lowered = raw.lower()
    if lowered in ("none", "null"):
        return None
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def _versions() -> dict:
    import numpy
    import torch

    from . import __version__

    return {
        "milbag": __version__,
        "python": sys.version.split()[0],
        "numpy": numpy.__version__,
        "torch": torch.__version__,
    }


def _write_manifest(output_path, args_namespace, config=None, extra=None):
    manifest = {
        "command": " ".join(sys.argv[1:]) if sys.argv else "",
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "versions": _versions(),
    }
    if config is not None:
        manifest["seed"] = config.seed
        manifest["config_hash"] = config.config_hash()
        manifest["config"] = config.to_dict()
    if extra:
        manifest.update(extra)
    path = Path(str(output_path) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _read_data(args) -> list:
    from .data import read_dataset

    data_dir = args.data or _default_data_dir()
    if not data_dir:
        raise ConfigError(f"no dataset directory: pass --data or set {DATA_DIR_ENV}")
    return read_dataset(data_dir)


def _cmd_generate(args) -> int:
    from .data import DatasetSpec, generate_synthetic, write_dataset

    spec = DatasetSpec(n_positive=args.n_positive, n_negative=args.n_negative,
                       slices_per_bag=args.slices, key_fraction=args.key_fraction,
                       seed=args.seed)
    bags = generate_synthetic(spec)
    write_dataset(args.out, bags)
    _write_manifest(Path(args.out) / "index.json", args,
                    extra={"dataset_spec": dataclasses.asdict(spec),
                           "n_bags": len(bags)})
    print(f"wrote {len(bags)} bags ({spec.n_positive} positive, "
          f"{spec.n_negative} negative) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .model import save_mil_model
    from .train import train_fold

    config = _load_config(args.preset, args.config, args.set)
    bags = _read_data(args)
    started = time.perf_counter()
    model, history = train_fold(bags, config)
    wall = time.perf_counter() - started
    save_mil_model(args.model_out, model)
    payload = {"config": config.to_dict(), "history": [h.to_dict() for h in history]}
    if args.history_out:
        Path(args.history_out).write_text(json.dumps(payload, indent=2, sort_keys=True))
    _write_manifest(args.model_out, args, config=config,
                    extra={"wall_seconds": wall, "n_bags": len(bags)})
    print(f"trained on {len(bags)} bags in {wall:.1f}s; model saved to {args.model_out}")
    return 0


def _cmd_evaluate(args) -> int:
    from .metrics import evaluate
    from .model import load_mil_model

    bags = _read_data(args)
    model = load_mil_model(args.model)
    report = evaluate(model, bags, args.threshold)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(payload)
        _write_manifest(args.report, args)
    print(payload)
    return 0


def _cmd_cv(args) -> int:
    from .train import run_cv

    config = _load_config(args.preset, args.config, args.set)
    bags = _read_data(args)
    report, timing = run_cv(bags, config, n_folds=args.folds, n_repeats=args.repeats,
                            workers=args.workers)
    payload = json.dumps(report, indent=2, sort_keys=True)
    Path(args.report).write_text(payload)
    _write_manifest(args.report, args, config=config, extra={"timing": timing,
                                                             "workers": args.workers})
    agg = report["aggregate"]
    for name, stats in agg.items():
        if stats["mean"] is not None:
            print(f"{name:<12} {stats['mean']:.3f} +/- {stats['std']:.3f}")
    print(f"report written to {args.report}")
    return 0


def _cmd_ablate(args) -> int:
    from .train import format_ablation_table, run_ablation

    config = _load_config(args.preset, args.config, args.set)
    bags = _read_data(args)
    seeds = [args.seed_base + i for i in range(args.seeds)]
    report = run_ablation(bags, config, seeds, include_pretext=args.pretext,
                          test_fraction=args.test_fraction, workers=args.workers)
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True))
        _write_manifest(args.report, args, config=config)
    print(format_ablation_table(report))
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, run_suite

    results = run_suite(seed=args.seed)
    print(format_results(results))
    return 0 if all(r.passed for r in results) else 1


def _cmd_export_attention(args) -> int:
    from .model import load_mil_model, write_attention_csv

    bags = _read_data(args)
    model = load_mil_model(args.model)
    write_attention_csv(args.out, bags, model)
    _write_manifest(args.out, args)
    print(f"attention for {len(bags)} bags written to {args.out}")
    return 0


def _add_config_flags(p):
    p.add_argument("--preset", choices=("paper", "synthetic"), default="synthetic",
                   help="base configuration (default: synthetic desk-scale)")
    p.add_argument("--config", help="JSON file overriding preset values")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override single config values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="milbag",
                                     description="attention MIL with virtual-bag "
                                                 "augmentation and location pretext tasks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-positive", type=int, default=10)
    p.add_argument("--n-negative", type=int, default=36)
    p.add_argument("--slices", type=int, default=3)
    p.add_argument("--key-fraction", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("train", help="train one model on a full dataset")
    p.add_argument("--data", default=None)
    _add_config_flags(p)
    p.add_argument("--model-out", required=True)
    p.add_argument("--history-out")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--report")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("cv", help="repeated stratified cross-validation")
    p.add_argument("--data", default=None)
    _add_config_flags(p)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=_cmd_cv)

    p = sub.add_parser("ablate", help="run ablation rows A-D and print a table")
    p.add_argument("--data", default=None)
    _add_config_flags(p)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds")
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--pretext", action="store_true",
                   help="also run the relative-location pretext row")
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("export-attention", help="per-instance attention weights as CSV")
    p.add_argument("--data", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_export_attention)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MilbagError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
