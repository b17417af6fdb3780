"""Command line entry point.

Exit codes: 0 success, 1 an episode or check failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from flatnmpc.errors import ConfigError
from flatnmpc.harness import (
    ExperimentConfig,
    load_config,
    refinement_overhead,
    run_lemniscate,
    run_regulation_suite,
    run_runtime_sweep,
    sweep_fit,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

# settings of the tracking experiment unless the config or a flag says otherwise
TRACK_DEFAULTS = {"t_f": 0.5, "n": 5}


def _on_off(text: str) -> bool:
    low = text.lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on or off, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flatnmpc", description="Flat-output NMPC experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment config")
    common.add_argument("--out", help="output directory")
    common.add_argument("--refine", type=_on_off, help="on or off (default: both modes)")
    common.add_argument("--n", type=int, help="node count (regulation: replaces the N list)")
    common.add_argument("--horizon", type=float, help="horizon t_f [s] (bench: the only horizon)")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--duration", type=float, help="episode length [s]")

    sub.add_parser("regulate", parents=[common], help="pose regulation suite")
    sub.add_parser("track", parents=[common], help="lemniscate tracking")
    bench = sub.add_parser("bench", parents=[common], help="runtime sweep over horizons")
    bench.add_argument("--trajectories", type=int, help="control cycles per horizon")
    val = sub.add_parser("validate", help="run the invariant suite")
    val.add_argument("--quick", action="store_true", help="reduced instance counts")
    val.add_argument("--seed", type=int, default=0)
    return parser


def _overrides(args, kind: str) -> dict:
    o = {"kind": kind, "out_dir": args.out, "seed": args.seed, "duration": args.duration}
    if args.refine is not None:
        o["refine"] = args.refine
    if kind == "regulation":
        if args.n is not None:
            o["n_values"] = (args.n,)
        o["t_f"] = args.horizon
    elif kind == "lemniscate":
        o["n"], o["t_f"] = args.n, args.horizon
    else:
        if args.horizon is not None:
            o["horizons"] = (args.horizon,)
        o["trajectories"] = getattr(args, "trajectories", None)
    return o


def _config(args, kind: str) -> ExperimentConfig:
    overrides = _overrides(args, kind)
    if args.config is not None:
        return load_config(args.config, overrides)
    if kind == "lemniscate":
        for k, v in TRACK_DEFAULTS.items():
            if overrides.get(k) is None:
                overrides[k] = v
    values = {k: v for k, v in overrides.items() if v is not None}
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid arguments: {exc}") from exc


def _print_table(table) -> None:
    print("N  refined  err_trans  err_rot  status")
    for r in table.rows:
        print(f"{r[0]:<3d}{r[1]:>6d}  {r[2]:>9.4g}  {r[3]:>7.4g}  {r[8]}")


def cmd_regulate(args) -> int:
    cfg = _config(args, "regulation")
    table, _ = run_regulation_suite(cfg)
    _print_table(table)
    print(f"results written to {Path(cfg.out_dir) / 'regulation_results.csv'}")
    return EXIT_FAIL if table.any_failed else EXIT_OK


def cmd_track(args) -> int:
    cfg = _config(args, "lemniscate")
    table, _ = run_lemniscate(cfg)
    _print_table(table)
    print(f"results written to {Path(cfg.out_dir) / 'lemniscate_metrics.csv'}")
    return EXIT_FAIL if table.any_failed else EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args, "runtime_sweep")
    result = run_runtime_sweep(cfg)
    print("horizon  N  refined  mean_ms  p95_ms")
    for r in result["rows"]:
        print(f"{r[0]:>7.2f} {r[1]:>3d} {r[2]:>8d} {r[4]:>8.3f} {r[5]:>7.3f}")
    for refined in sorted({r[2] for r in result["rows"]}):
        if sum(r[2] == refined for r in result["rows"]) > 1:
            slope, icept, r2 = sweep_fit(result["rows"], bool(refined))
            print(f"fit refined={refined}: {slope:.3f} ms/node + {icept:.3f} ms, R^2 = {r2:.3f}")
    overhead = refinement_overhead(result["rows"])
    if overhead:
        print("refinement overhead [ms]: " + ", ".join(f"{h:g}: {v:.2f}" for h, v in overhead.items()))
    return EXIT_OK


def cmd_validate(args) -> int:
    from flatnmpc.checks import run_invariant_suite

    results = run_invariant_suite(quick=args.quick, seed=args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


COMMANDS = {"regulate": cmd_regulate, "track": cmd_track, "bench": cmd_bench, "validate": cmd_validate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
