"""Command-line entry point: ``misosim {simulate,optimize,gen-trace,optsta-search}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .experiment import CONFIG_KEYS, ConfigError, convert_value, load_config, optsta_search, run_experiment
from .optimizer import InfeasibleError, optimize_partition
from .profiles import read_profiles
from .topology import load_catalog
from .workload import TraceError, generate_trace, save_trace

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INFEASIBLE = 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    group = p.add_argument_group("config overrides")
    for key in CONFIG_KEYS:
        group.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="VALUE", default=None)


def _config_from(args):
    overrides = {k: convert_value(k, getattr(args, k)) for k in CONFIG_KEYS if getattr(args, k) is not None}
    return load_config(args.config, overrides)


def cmd_simulate(args) -> int:
    config = _config_from(args)
    paths = run_experiment(config)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_optsta(args) -> int:
    config = _config_from(args)
    report = optsta_search(config, trial=args.trial)
    print(f"chosen: {report.chosen}")
    for entry, jct in report.table:
        print(f"  {entry.label():<16} {jct:.3f}")
    return EXIT_OK


def cmd_gen_trace(args) -> int:
    config = _config_from(args)
    trace = generate_trace(config.trace_spec(config.base_seed))
    save_trace(trace, args.out)
    print(f"wrote {len(trace)} jobs to {args.out}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    jobs = read_profiles(args.profiles)
    catalog = load_catalog(args.catalog) if args.catalog else None
    result = optimize_partition([(j.job_id, j.effective_table()) for j in jobs], catalog)
    print(result)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misosim", description="MIG cluster scheduling simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run policies over seeded trials and write CSV/JSON results")
    _add_config_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("optsta-search", help="evaluate every static partition on one trace")
    _add_config_flags(p)
    p.add_argument("--trial", type=int, default=0, help="trial index (seed = base_seed + trial)")
    p.set_defaults(func=cmd_optsta)

    p = sub.add_parser("gen-trace", help="write a synthetic trace file")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("optimize", help="best partition for up to 7 co-located jobs")
    p.add_argument("profiles", type=Path, help="profile record CSV")
    p.add_argument("--catalog", type=Path, help="partition catalog file (default: built-in)")
    p.set_defaults(func=cmd_optimize)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (OSError, TraceError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # Malformed profile or catalog files.
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
