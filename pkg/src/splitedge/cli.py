"""Command-line entry point: ``splitedge <subcommand> [--config PATH] ...``.

Exit codes: 0 success, 2 configuration error, 3 infeasible allocation
problem, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from . import config as config_mod
from .errors import ConfigError, InfeasibleError, NumericalError
from .experiments import (
    cmd_allocate,
    cmd_compare,
    cmd_gen_data,
    cmd_sweep_clients,
    cmd_sweep_cut,
)

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 2, 3, 4

COMMANDS = {
    "compare": (cmd_compare, "SL versus FedAvg/FedProx/FedOpt on identical shards"),
    "sweep-cut": (cmd_sweep_cut, "SL runs across cut positions"),
    "sweep-clients": (cmd_sweep_clients, "SL runs across client counts"),
    "allocate": (cmd_allocate, "resource-allocation sweeps over power, CPU and bandwidth"),
    "gen-data": (cmd_gen_data, "export the synthetic dataset and its splits"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitedge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="TOML config (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override experiment.seed")
        p.add_argument("--out", metavar="DIR", help="override experiment.out_dir")
        p.add_argument("--parallel", type=int, metavar="N", help="worker processes")
    return parser


def _load(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.with_out_dir(args.out)
    if args.parallel is not None:
        if args.parallel < 1:
            raise ConfigError("--parallel must be >= 1")
        cfg = cfg.with_parallel(args.parallel)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    fn, _ = COMMANDS[args.command]
    try:
        result = fn(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for key, path in result["files"].items():
        if isinstance(path, tuple):
            path = ", ".join(str(p) for p in path)
        print(f"{key}: {path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
