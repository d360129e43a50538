"""Command-line interface.

Subcommands:
  run        run every (algorithm, seed) pair of a config, write traces/summaries
  sweep      rerun a config across one axis (gamma | alpha_dwn | s | q)
  validate   run the Monte-Carlo validation suite, emit a JSON report
  gamma-max  print the maximal-step bounds for each algorithm in a config

Exit codes: 0 ok, 1 config error, 2 validation failure, 3 all seeds diverged.

The validation suite gates run/sweep: a failing suite blocks the experiment
unless --skip-validation is passed.
"""
from __future__ import annotations

import argparse
import json
import sys

from .algorithms import gamma_max_bounds
from .config import ConfigError, load_config
from .runner import (SWEEP_AXES, all_diverged, build_algo, build_problem,
                     run_experiment, sweep, write_sweep_csv)
from .problems import BatchSpec

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VALIDATION = 2
EXIT_DIVERGED = 3

_GATE_TRIALS = 10_000


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="TOML experiment config")
    p.add_argument("--jobs", type=int, default=1,
                   help="max concurrent (algorithm, seed) runs")
    p.add_argument("--seed-offset", type=int, default=0,
                   help="added to every seed in the config")
    p.add_argument("--output", default=None,
                   help="output directory (overrides run.output)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compsgd",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run all (algorithm, seed) pairs")
    _add_common(p_run)
    p_run.add_argument("--skip-validation", action="store_true",
                       help="do not gate on the validation suite")

    p_sweep = sub.add_parser("sweep", help="sweep one axis across values")
    _add_common(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated axis values")
    p_sweep.add_argument("--skip-validation", action="store_true")

    p_val = sub.add_parser("validate", help="run the validation suite")
    p_val.add_argument("--trials", type=int, default=_GATE_TRIALS)
    p_val.add_argument("--seed", type=int, default=0)
    p_val.add_argument("--only", default=None,
                       help="run only the named check")

    p_gm = sub.add_parser("gamma-max", help="print maximal-step bounds")
    p_gm.add_argument("--config", required=True)
    p_gm.add_argument("--json", action="store_true", dest="as_json")
    return parser


def _load(path: str):
    try:
        return load_config(path)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return None


def _gate(skip: bool) -> bool:
    """Run the reduced validation suite; True means cleared to proceed."""
    if skip:
        return True
    from .validation import run_full_suite, suite_passed
    reports = run_full_suite(trials=_GATE_TRIALS)
    if suite_passed(reports):
        return True
    for r in reports:
        if r.status == "FAIL":
            print(f"validation failure: {json.dumps(r.to_dict())}",
                  file=sys.stderr)
    return False


def _cmd_run(args) -> int:
    exp = _load(args.config)
    if exp is None:
        return EXIT_CONFIG
    if not _gate(args.skip_validation):
        return EXIT_VALIDATION
    out = args.output or exp.run.output
    try:
        result = run_experiment(exp, output_dir=out, jobs=args.jobs,
                                seed_offset=args.seed_offset)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for name, summary in result.summaries.items():
        line = (f"{name}: saturation={summary.saturation_level:.3f} "
                f"statuses={','.join(summary.statuses)}")
        if result.warnings[name]:
            line += f"  [warnings: {'; '.join(result.warnings[name])}]"
        print(line)
    if all_diverged(result):
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_sweep(args) -> int:
    exp = _load(args.config)
    if exp is None:
        return EXIT_CONFIG
    if not _gate(args.skip_validation):
        return EXIT_VALIDATION
    values = []
    for tok in args.values.split(","):
        tok = tok.strip()
        values.append(int(tok) if args.axis == "s" else float(tok))
    out = args.output or exp.run.output
    try:
        rows = sweep(exp, args.axis, values, output_dir=out, jobs=args.jobs,
                     seed_offset=args.seed_offset)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if out is not None:
        import os
        write_sweep_csv(os.path.join(out, "sweep_summary.csv"), rows)
    header = f"{'value':>12} {'algorithm':>12} {'saturation':>12} {'flags':>18}"
    print(header)
    for r in rows:
        flag = "gamma>gamma_max" if r["gamma_exceeds_max"] else ""
        if r["n_diverged"]:
            flag += f" diverged={r['n_diverged']}"
        print(f"{r['value']:>12} {r['algorithm']:>12} "
              f"{r['saturation_level']:>12.3f} {flag:>18}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .validation import run_full_suite, suite_passed
    reports = run_full_suite(trials=args.trials, seed=args.seed)
    if args.only is not None:
        reports = [r for r in reports if r.check == args.only]
        if not reports:
            print(f"no check named {args.only!r}", file=sys.stderr)
            return EXIT_CONFIG
    print(json.dumps([r.to_dict() for r in reports], indent=1))
    return EXIT_OK if suite_passed(reports) else EXIT_VALIDATION


def _cmd_gamma_max(args) -> int:
    exp = _load(args.config)
    if exp is None:
        return EXIT_CONFIG
    try:
        problem = build_problem(exp)
        batch = BatchSpec(b=exp.run.batch, full_batch=exp.run.full_batch)
        table = {}
        for block in exp.algorithms:
            cfg, _ = build_algo(block, problem, batch)
            bounds = gamma_max_bounds(problem.L, cfg.up.omega, cfg.dwn.omega,
                                      problem.n_workers)
            if cfg.update_mode == "degraded":
                dore = 1.0 / (8.0 * problem.L * (1.0 + cfg.dwn.omega)
                              * (1.0 + cfg.up.omega / problem.n_workers))
                bounds = {"gamma_degraded": dore, "gamma_max": dore}
            table[block.name] = bounds
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.as_json:
        print(json.dumps({"L": problem.L, "mu": problem.mu,
                          "bounds": table}, indent=1))
    else:
        print(f"L={problem.L:.12g} mu={problem.mu:.12g}")
        for name, bounds in table.items():
            parts = " ".join(f"{k}={v:.12g}" for k, v in bounds.items())
            print(f"{name}: {parts}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "sweep":
        return _cmd_sweep(args)
    if args.command == "validate":
        return _cmd_validate(args)
    return _cmd_gamma_max(args)


if __name__ == "__main__":
    sys.exit(main())
