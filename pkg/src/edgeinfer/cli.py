"""Command-line entry points.

Subcommands: ``train``, ``eval``, ``sweep``, ``validate-config``,
``export-heatmap``. The output root defaults to ``$EDGEINFER_OUT`` or
``./runs``. Exit codes: 0 success, 2 configuration error, 3 runtime error,
4 failed validation/acceptance check.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError, SystemConfig
from .env import EnvError
from .harness import (
    ExperimentPlan,
    desk_plan,
    evaluate_checkpoint,
    heatmap_from_metrics,
    run,
)
from .profiles import CatalogError, load_catalog, synth_catalog

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CHECK_FAILED = 4


def _output_root(value: str | None) -> str:
    return value or os.environ.get("EDGEINFER_OUT", "runs")


def _load_plan(args) -> ExperimentPlan:
    if args.plan:
        return ExperimentPlan.from_json_file(args.plan)
    overrides = {}
    if args.algo:
        overrides["algorithms"] = tuple(args.algo.split(","))
    if args.seeds:
        overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    plan = desk_plan(name=args.name, **overrides)
    if args.iterations is not None:
        plan = ExperimentPlan.from_dict(
            {**plan.to_dict(), "train": {**plan.train.to_dict(), "iterations": args.iterations}}
        )
    return plan


def cmd_train(args) -> int:
    plan = _load_plan(args)
    out = run(plan, _output_root(args.out))
    print(f"run complete: {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    plan = ExperimentPlan.from_json_file(args.plan)
    if plan.sweep_axis is None:
        raise ConfigError("sweep requires a plan with a sweep_axis")
    out = run(plan, _output_root(args.out))
    print(f"sweep complete: {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.catalog:
        catalog = load_catalog(args.catalog)
    else:
        families = tuple(args.families.split(","))
        catalog = synth_catalog(families, args.services_per_model, args.catalog_seed)
    result = evaluate_checkpoint(args.checkpoint, catalog, args.episodes, seed=args.seed)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_validate_config(args) -> int:
    try:
        if args.plan:
            ExperimentPlan.from_json_file(args.plan)
        if args.config:
            SystemConfig.from_json_file(args.config)
        if args.catalog:
            load_catalog(args.catalog)
    except (ConfigError, CatalogError) as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    print("ok")
    return EXIT_OK


def cmd_export_heatmap(args) -> int:
    heatmap_from_metrics(args.metrics, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeinfer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one or more algorithms from a plan")
    train.add_argument("--plan", help="experiment plan JSON (overrides the desk default)")
    train.add_argument("--name", default="desk_default", help="run name for the desk plan")
    train.add_argument("--algo", help="comma-separated algorithm names")
    train.add_argument("--seeds", help="comma-separated run seeds")
    train.add_argument("--iterations", type=int, help="override training iterations")
    train.add_argument("--out", help="output root (default $EDGEINFER_OUT or ./runs)")
    train.set_defaults(func=cmd_train)

    sweep = sub.add_parser("sweep", help="run a sweep plan over its axis values")
    sweep.add_argument("--plan", required=True)
    sweep.add_argument("--out")
    sweep.set_defaults(func=cmd_sweep)

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint greedily")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--catalog", help="profile catalog JSON")
    evaluate.add_argument("--families", default="lenet9,resnet18,vgg16")
    evaluate.add_argument("--services-per-model", type=int, default=2)
    evaluate.add_argument("--catalog-seed", type=int, default=7)
    evaluate.add_argument("--episodes", type=int, default=5)
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.set_defaults(func=cmd_eval)

    validate = sub.add_parser("validate-config", help="check config/plan/catalog files")
    validate.add_argument("--config")
    validate.add_argument("--plan")
    validate.add_argument("--catalog")
    validate.set_defaults(func=cmd_validate_config)

    heatmap = sub.add_parser("export-heatmap", help="per-user cost rank table from metrics")
    heatmap.add_argument("--metrics", required=True, help="metrics.csv produced by a run")
    heatmap.add_argument("--out", required=True)
    heatmap.set_defaults(func=cmd_export_heatmap)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CatalogError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EnvError, OSError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
