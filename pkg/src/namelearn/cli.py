"""Command-line experiment runner.

Subcommands: ``few-shot``, ``zero-shot``, ``ablate``, ``world build`` and
``selftest``.  Exit codes: 0 full success, 2 partial failures (some grid
cells failed but the run completed), 1 hard errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (
    ABLATION_FLAGS,
    AblationError,
    ConfigError,
    ExperimentConfig,
    emit_metrics,
    parse_config_file,
    run_ablation,
    run_few_shot,
    run_zero_shot,
)
from .selfcheck import run_selftest
from .world import WorldBuildError, build_world, save_world

HARD_ERRORS = (ConfigError, AblationError, WorldBuildError, OSError, ValueError)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key-value config file")
    parser.add_argument("--seed", type=str, help="comma-separated seed list override")
    parser.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel grid workers")


def _load_config(args) -> ExperimentConfig:
    config = parse_config_file(args.config) if args.config else ExperimentConfig()
    if args.seed:
        seeds = tuple(int(s) for s in args.seed.split(",") if s.strip())
        config = replace(config, seeds=seeds)
    return config


def _report(result, out_dir) -> int:
    paths = emit_metrics(result, out_dir)
    failed = result.failed_cells()
    print(f"wrote {paths['results']}")
    for shot in sorted({c.shot for c in result.cells}):
        ood = result.mean_ood(shot)
        sc = result.mean_sc(shot)
        print(f"  shot {shot:>3}: ood_acc={ood:.4f} sc_acc={sc:.4f}")
    if failed:
        print(f"  {len(failed)} cell(s) failed", file=sys.stderr)
        return 2
    return 0


def cmd_few_shot(args) -> int:
    return _report(run_few_shot(_load_config(args), jobs=args.jobs), args.out)


def cmd_zero_shot(args) -> int:
    return _report(run_zero_shot(_load_config(args), jobs=args.jobs), args.out)


def cmd_ablate(args) -> int:
    config = _load_config(args)
    if args.ablation not in ABLATION_FLAGS:
        raise AblationError(
            f"unknown ablation {args.ablation!r}; choose from {', '.join(ABLATION_FLAGS)}"
        )
    config = replace(config, **{args.ablation: True})
    result = run_ablation(config, jobs=args.jobs)
    emit_metrics(result.full, Path(args.out) / "full")
    emit_metrics(result.ablated, Path(args.out) / "ablated")
    deltas = {str(k): v for k, v in result.delta_by_shot().items()}
    delta_path = Path(args.out) / "deltas.json"
    delta_path.write_text(json.dumps({"flag": result.flag, "ood_drop_by_shot": deltas}, indent=2))
    print(f"wrote {delta_path}")
    for shot, drop in result.delta_by_shot().items():
        print(f"  shot {shot:>3}: ood drop {drop:+.4f}")
    failed = result.full.failed_cells() + result.ablated.failed_cells()
    return 2 if failed else 0


def cmd_world_build(args) -> int:
    config = _load_config(args)
    world = build_world(config.world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = out / "world.bin"
    save_world(world, snapshot)
    report_path = out / "world_report.json"
    report_path.write_text(json.dumps(world.report, indent=2, sort_keys=True) + "\n")
    print(f"wrote {snapshot}")
    print(f"  seen-prompt cosine >= {world.report['sc_min_prompt_cosine']:.4f}")
    print(f"  blind-token spread = {world.report['ood_blindness_spread']:.3g}")
    return 0


def cmd_selftest(args) -> int:
    return 0 if run_selftest() else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="namelearn", description="few-shot name-embedding learning experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("few-shot", help="shot x seed x lr sweep on one world")
    _add_common(p)
    p.set_defaults(func=cmd_few_shot)

    p = sub.add_parser("zero-shot", help="masked-name runs across world-seed splits")
    _add_common(p)
    p.set_defaults(func=cmd_zero_shot)

    p = sub.add_parser("ablate", help="paired full-vs-ablated comparison")
    _add_common(p)
    p.add_argument("--ablation", required=True, help="ablation flag name")
    p.set_defaults(func=cmd_ablate)

    world_parser = sub.add_parser("world", help="world snapshot utilities")
    world_sub = world_parser.add_subparsers(dest="world_command", required=True)
    p = world_sub.add_parser("build", help="build and save a world snapshot")
    _add_common(p)
    p.set_defaults(func=cmd_world_build)

    p = sub.add_parser("selftest", help="gradient-check and loss-oracle suites")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except HARD_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
