"""Command line entry point: ``spin run``, ``spin sweep`` and ``spin eval``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from typing import List, Optional

from .errors import ConfigError
from .harness import AGGREGATE_COLUMNS, METRIC_COLUMNS, evaluate_run, load_config, run_experiment, sweep


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--alpha", type=float)
    p.add_argument("--delta", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spin", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one configuration and write its CSVs")
    _common(run)
    run.add_argument("--algorithm", choices=["spin", "baseline"])
    run.add_argument("--speed", type=int)

    sw = sub.add_parser("sweep", help="run a grid over algorithms x speeds x seeds")
    _common(sw)
    sw.add_argument("--algorithm", default="spin,baseline",
                    help="comma-separated algorithms (default: spin,baseline)")
    sw.add_argument("--speed", default="0,1,2,3", help="comma-separated speeds (default: 0,1,2,3)")
    sw.add_argument("--n-seeds", type=int, default=10)
    sw.add_argument("--workers", type=int, default=1)

    ev = sub.add_parser("eval", help="recompute metrics for a finished run directory")
    ev.add_argument("run_dir")
    return parser


def _overrides(args, *keys) -> dict:
    values = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(item, "expected KEY=VALUE after --set")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    return values


def _print_rows(columns, rows) -> None:
    print(",".join(columns))
    for row in rows:
        print(",".join(str(x) for x in row))


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config, _overrides(args, "seed", "alpha", "delta",
                                                      "algorithm", "speed"))
            log, metrics = run_experiment(cfg, args.out)
            _print_rows(METRIC_COLUMNS, [metrics.as_tuple()])
            if log.error:
                print(f"run aborted: {log.error}", file=sys.stderr)
                return 1
        elif args.command == "sweep":
            base = load_config(args.config, _overrides(args, "alpha", "delta"))
            grid = [replace(base, algorithm=a.strip(), speed=int(s))
                    for a in args.algorithm.split(",") for s in args.speed.split(",")]
            master = args.seed if args.seed is not None else base.seed
            _, agg = sweep(grid, args.n_seeds, master, args.workers, args.out)
            _print_rows(AGGREGATE_COLUMNS, agg)
        else:
            _print_rows(METRIC_COLUMNS, [evaluate_run(args.run_dir).as_tuple()])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
