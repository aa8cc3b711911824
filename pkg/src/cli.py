"""Command-line entrypoints for the diffusion simulator."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import runner
from .config import RunConfig, apply_overrides, config_schema, load_config
from .errors import ConfigError, InvalidArgumentError, InvalidInputError, McwfError, NumericalError
from .persist import dumps

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_ACCEPTANCE = 4

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="Worker processes / solver threads (default 1).")
    common.add_argument("--out", type=Path, default=None, help="Output directory, overrides outputs.directory.")
    common.add_argument("--seed", type=int, default=None, help="Master seed, overrides ensemble.master_seed.")
    common.add_argument("--quiet", action="store_true", help="Only log warnings and errors.")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="adatom-mcwf", description="Quantum diffusion of H on Ni(111)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("fit-potential", "Fit the adiabatic potential to the configured targets."),
        ("bands", "Fit the potential and solve the band structure."),
        ("run", "Run the ensemble at every configured (T, gamma) point."),
        ("sweep", "Run every point and fit Arrhenius and gamma laws."),
        ("oracle-check", "Compare the jump ensemble with the master equation on a small grid."),
    ):
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        sub.add_argument("config", type=Path, help="JSON run configuration.")

    analyze = subparsers.add_parser("analyze", parents=[common], help="Recompute the analysis of an output directory.")
    analyze.add_argument("directory", type=Path)

    trace = subparsers.add_parser("trace", parents=[common], help="Re-simulate one trajectory and write its trace.")
    trace.add_argument("directory", type=Path)

    subparsers.add_parser("schema", parents=[common], help="Print the JSON schema of the run configuration.")
    return parser


def _configure_logging(quiet: bool) -> None:
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


def _load(args: argparse.Namespace) -> RunConfig:
    return apply_overrides(load_config(args.config), seed=args.seed, out=args.out)


def _dispatch(args: argparse.Namespace) -> int:
    if args.threads < 1:
        raise InvalidArgumentError(f"--threads must be >= 1, got {args.threads}")
    if args.command == "schema":
        print(json.dumps(config_schema(), indent=2, sort_keys=True))
        return EXIT_OK

    if args.command == "analyze":
        payload = runner.analyze_directory(args.directory)
        for point in payload["points"]:
            print(f"{point['point']}: D = {point['diffusion']['D_A2_per_s']:.4g} A2/s")
        for fit in payload["arrhenius"]:
            print(f"gamma={fit['gamma']:g}: E_a = {fit['E_a_meV']:.2f} +- {fit['E_a_err_meV']:.2f} meV")
        return EXIT_OK

    if args.command == "trace":
        if args.seed is None:
            raise InvalidArgumentError("trace needs --seed, the trajectory seed listed in traj_meta.json")
        path = runner.trace_trajectory(args.directory, args.seed, threads=args.threads)
        print(path)
        return EXIT_OK

    config = _load(args)
    if args.command == "fit-potential":
        payload = runner.run_fit_potential(config, threads=args.threads)
        print(dumps(payload), end="")
    elif args.command == "bands":
        table = runner.run_bands(config, threads=args.threads)
        print(dumps(table.summary()), end="")
    elif args.command in ("run", "sweep"):
        entry = runner.sweep if args.command == "sweep" else runner.run
        analysis = entry(config, threads=args.threads)
        print(f"{len(analysis.get('points', []))} points written to {config.outputs.directory}")
    elif args.command == "oracle-check":
        outcome = runner.oracle_check(config, threads=args.threads)
        print(f"oracle check {'passed' if outcome.passed else 'FAILED'}: {outcome.path}")
        return EXIT_OK if outcome.passed else EXIT_ACCEPTANCE
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    _configure_logging(args.quiet)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        for problem in exc.problems:
            logger.error("config error: %s", problem)
        return EXIT_USAGE
    except (InvalidArgumentError, InvalidInputError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except NumericalError as exc:
        logger.error("numerical failure (%s): %s", type(exc).__name__, exc)
        return EXIT_NUMERICAL
    except McwfError as exc:
        logger.error("%s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
