"""Command line interface: ``bcbf run | montecarlo | bound``.

Exit codes: 0 success, 1 configuration error, 2 a run ended on an
infeasible QP.  Log verbosity comes from ``BCBF_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import ConfigurationError
from .scenario import load_scenario
from .simulate import CONTROLLERS, bound_report, format_bound_table, monte_carlo, simulate, summarize, write_outputs

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INFEASIBLE = 2
LOG_ENV = "BCBF_LOG_LEVEL"


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors; exit code 2 is reserved for infeasible runs
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    overrides = _Parser(add_help=False)
    overrides.add_argument("--scenario", required=True, help="scenario JSON file or built-in name")
    overrides.add_argument("--epsilon", type=float, help="override the jump-leave tolerance")
    overrides.add_argument("--delta", type=float, help="override the risk level of every constraint")
    overrides.add_argument("--dt", type=float, help="override the control period")

    parser = _Parser(prog="bcbf", description="Belief control barrier function simulations")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[overrides], help="simulate one seeded run")
    run.add_argument("--controller", choices=CONTROLLERS, default="bcbf")
    run.add_argument("--seed", type=_u64, default=None)
    run.add_argument("--out", required=True, help="output directory")

    mc = sub.add_parser("montecarlo", parents=[overrides], help="run a Monte Carlo study")
    mc.add_argument("--controller", choices=CONTROLLERS, default="bcbf")
    mc.add_argument("--runs", type=_positive_int, default=100)
    mc.add_argument("--workers", type=_positive_int, default=1)
    mc.add_argument("--seed", type=_u64, default=None)
    mc.add_argument("--out", required=True, help="output directory")

    bound = sub.add_parser("bound", parents=[overrides], help="print natural bound and gamma along a nominal run")
    bound.add_argument("--controller", choices=CONTROLLERS, default="bcbf")
    bound.add_argument("--steps", type=_positive_int, default=None, help="limit the number of steps")
    return parser


def _configure_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        scenario = load_scenario(args.scenario, epsilon=args.epsilon, delta=args.delta, dt=args.dt)
    except (ConfigurationError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "run":
        rec = simulate(scenario, args.controller, args.seed)
        report = summarize([rec], scenario, args.controller, rec.seed)
        out = write_outputs([rec], report, args.out)
        print(f"wrote {out}")
        if rec.status != "ok":
            print(f"run terminated: {rec.message}", file=sys.stderr)
            return EXIT_INFEASIBLE
        return EXIT_OK

    if args.command == "montecarlo":
        report, records = monte_carlo(scenario, args.controller, args.runs, args.workers, args.seed)
        out = write_outputs(records, report, args.out)
        print(report.to_json())
        print(f"wrote {out}")
        return EXIT_INFEASIBLE if report.infeasible_runs else EXIT_OK

    rows = bound_report(scenario, steps=args.steps, controller=args.controller)
    print(format_bound_table(rows))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
