"""Command line entry point: ``sirw <experiment> --spec spec.json ...``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from .defaults import THRESHOLDS, WORKERS_ENV, Thresholds
from .experiments import EXPERIMENTS, ConfigError, ExperimentConfig, run_experiment
from .weights import InvalidWeightSpec, WeightSpec, require_valid


def _load_spec(text: str) -> WeightSpec:
    p = Path(text)
    raw = p.read_text() if p.exists() else text
    spec = WeightSpec.from_json(raw)
    require_valid(spec)
    return spec


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sirw",
        description="Monte Carlo and exact checks for self-interacting random walks.",
        epilog=f"Worker processes: set {WORKERS_ENV} or pass --workers.")
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--spec", required=True, help="weight spec as a JSON file or inline JSON")
    ap.add_argument("--n", type=int, default=1000, help="scale (steps, urn level or BLP scale)")
    ap.add_argument("--reps", type=int, default=1000)
    ap.add_argument("--t", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--format", choices=("csv", "json"), default="csv")
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--param", action="append", default=[], metavar="KEY=JSON",
                    help="experiment parameter, e.g. --param variant='\"forward\"' or --param K='[1,2,4]'")
    th = ap.add_argument_group("thresholds")
    for f in fields(Thresholds):
        th.add_argument(f"--{f.name.replace('_', '-')}", dest=f"th_{f.name}", type=float, default=None,
                        help=f"default {getattr(THRESHOLDS, f.name)}")
    return ap


def _params(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--param expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    th = THRESHOLDS.override(**{f.name: getattr(args, f"th_{f.name}") for f in fields(Thresholds)})
    return ExperimentConfig(args.experiment, _load_spec(args.spec), args.n, args.reps, args.t, args.seed,
                            args.out, args.format, _params(args.param), th)


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cfg = config_from_args(args)
        res = run_experiment(cfg, args.workers)
    except (ConfigError, InvalidWeightSpec, ValueError, OSError) as e:
        print(f"sirw: error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(res.summary, sort_keys=True, indent=1, default=str))
    if res.files:
        print(f"wrote {', '.join(sorted(res.files))} to {cfg.out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
