"""Command-line entry point: ``wirelessfedft run|sweep|compare``."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from wirelessfedft.config import ConfigError, ExperimentConfig, load_config
from wirelessfedft.harness import (
    DataError,
    compare,
    format_summary,
    run_experiment,
    sweep,
)
from wirelessfedft.scheduler import POLICIES

EXIT_OK = 0
EXIT_ORDERING = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.rounds is not None:
        if args.rounds < 1:
            raise ConfigError("--rounds must be at least 1")
        cfg = dataclasses.replace(cfg, rounds=args.rounds)
    return cfg


def _add_common(p):
    p.add_argument("--config", help="JSON experiment config (defaults used when omitted)")
    p.add_argument("--policy", choices=POLICIES, action="append",
                   help="policy to run; repeat for several (default: config policies)")
    p.add_argument("--seed", type=int, action="append", help="seed; repeat for several")
    p.add_argument("--rounds", type=int, help="override the number of rounds")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.add_argument("--schedule-only", action="store_true",
                   help="simulate channel and scheduler only, skip training")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wirelessfedft",
                                     description="Wireless split-LoRA federated fine-tuning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run every configured policy and seed")
    _add_common(p_run)

    p_sweep = sub.add_parser("sweep", help="repeat the run over delay budgets")
    _add_common(p_sweep)
    p_sweep.add_argument("--param", default="delay_budget", choices=["delay_budget"])
    p_sweep.add_argument("--values", type=float, nargs="+", required=True,
                         help="delay budgets in seconds (multipliers with --relative)")
    p_sweep.add_argument("--relative", action="store_true",
                         help="interpret values as multiples of the config delay budget")

    p_cmp = sub.add_parser("compare", help="summarise and compare metrics CSVs")
    p_cmp.add_argument("files", nargs="+")
    p_cmp.add_argument("--enforce", action="store_true",
                       help="exit nonzero if the accuracy ordering is violated")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            result = compare(args.files)
            print(result.format())
            if args.enforce and any(ok is False for ok in result.ordering.values()):
                return EXIT_ORDERING
            return EXIT_OK

        cfg = _load(args)
        out = args.out or cfg.output_dir
        train = not args.schedule_only
        if args.command == "run":
            res = run_experiment(cfg, out, args.policy, args.seed, train)
            print(format_summary(res.summaries))
            print(f"metrics: {res.metrics_path}")
            if res.bounds_path is not None:
                print(f"bound (estimate-parameterized, F* proxy = running-min loss): {res.bounds_path}")
        else:
            res = sweep(cfg, args.values, out, args.relative, args.policy, args.seed, train)
            for budget, r in zip(res.values, res.results):
                print(f"delay budget {budget:.6g} s")
                print(format_summary(r.summaries))
            print(f"summary: {res.summary_path}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
