"""Command-line entry point: ``eggroll <subcommand> [--config PATH] [--seed N] [--out PATH]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config, resolve
from .experiments import EXPERIMENTS, SCHEMAS

__all__ = ["main", "build_parser"]

_HELP = {
    "es-bench": "EGGROLL vs OpenES on an analytic matrix fitness",
    "egg-train": "integer-only training of the EGG language model",
    "score-plot": "tabulate z * density of the low-rank marginal against its Gaussian limit",
    "rank-decay": "low-rank gradient error versus rank",
    "rank-law": "numerical rank of a single update",
    "microbench": "population forward throughput: decomposed vs naive vs inference",
    "tune-threshold": "grid search of the integer update threshold",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eggroll", description="Low-rank evolution strategies experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        p.add_argument("--config", type=Path, help="flat key = value settings file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", type=Path, default=Path(f"{name}.csv"), help="output CSV path")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        raw = load_config(args.config) if args.config else {}
        settings = resolve(SCHEMAS[args.command], raw, {"seed": args.seed})
    except (ConfigError, OSError) as exc:
        print(f"eggroll {args.command}: {exc}", file=sys.stderr)
        return 2
    args.out.parent.mkdir(parents=True, exist_ok=True)
    try:
        EXPERIMENTS[args.command](settings, args.out)
    except ValueError as exc:
        print(f"eggroll {args.command}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
