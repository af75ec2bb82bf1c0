"""Command line entry: python -m curveflow <subcommand>."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from . import experiments
from .errors import ConfigError, LabError
from .settings import get_settings, log_level, save_settings, set_settings


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curveflow", description="Curve-shrinking flow identity lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="Path to a JSON experiment config")
        p.add_argument("--scenario", help="Shipped scenario name (see list-scenarios)")
        p.add_argument("--out", help="Output directory (overrides output.directory)")
        p.add_argument("--seed", type=int, help="Override the config seed")
        p.add_argument("--checks", help="Comma-separated check names overriding the config")

    run_p = sub.add_parser("run", help="Integrate one experiment and write its artifacts")
    experiment_flags(run_p)

    conv_p = sub.add_parser("convergence", help="Refinement study over N*2^i, dt/4^i")
    experiment_flags(conv_p)
    conv_p.add_argument("--levels", type=int, help="Number of refinement levels (>= 3)")

    sub.add_parser("list-scenarios", help="Print the shipped scenario registry")

    val_p = sub.add_parser("validate-background", help="Check dg/dt = -2 Ric on a background")
    val_p.add_argument("--config", help="Path to a JSON experiment config")
    val_p.add_argument("--scenario", help="Shipped scenario name")
    val_p.add_argument("--seed", type=int, default=0)

    suite_p = sub.add_parser("suite", help="Run every shipped scenario and write suite.json")
    suite_p.add_argument("--out", default="results", help="Output directory")
    suite_p.add_argument("--seed", type=int, default=0)

    settings_p = sub.add_parser("settings", help="Print the numerical defaults, or update and persist them")
    settings_p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="JSON value, repeatable")
    return parser


def _update_settings(assignments: List[str]) -> None:
    updates: Dict[str, Any] = {}
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError([f"--set expects KEY=VALUE (got '{item}')"])
        try:
            updates[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            updates[key.strip()] = value
    try:
        set_settings(updates)
    except ValueError as e:
        raise ConfigError([str(e)])
    save_settings()
    logging.info(f"[Settings] updated {', '.join(sorted(updates))}")


def _load_config(args: argparse.Namespace) -> experiments.ExperimentConfig:
    overrides: Dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "checks", None):
        overrides["checks"] = [c.strip() for c in args.checks.split(",") if c.strip()]
    if args.config and args.scenario:
        raise ConfigError(["use either --config or --scenario, not both"])
    if args.scenario:
        return experiments.scenario_config(args.scenario, overrides)
    if not args.config:
        raise ConfigError(["one of --config or --scenario is required"])
    try:
        with open(args.config, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError([f"cannot read config {args.config}: {e}"])
    if isinstance(raw, dict):
        raw.update(overrides)
    return experiments.parse_config(json.dumps(raw))


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=log_level(), format="%(asctime)s - %(levelname)s - %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "list-scenarios":
            print(experiments.list_scenarios())
            return experiments.EXIT_OK
        if args.command == "suite":
            return experiments.suite(args.out, seed=args.seed)
        if args.command == "settings":
            if args.set:
                _update_settings(args.set)
            print(json.dumps(get_settings(), indent=2, sort_keys=True))
            return experiments.EXIT_OK
        config = _load_config(args)
        if args.command == "validate-background":
            _, ok = experiments.validate_background(config.background, seed=args.seed)
            return experiments.EXIT_OK if ok else experiments.EXIT_FAILED
        if args.command == "run":
            return experiments.run(config, args.out).exit_status
        levels = args.levels if args.levels is not None else config.levels
        if levels < 3:
            raise ConfigError(["--levels must be >= 3"])
        experiments.convergence(config, levels, args.out)
        return experiments.EXIT_OK
    except ConfigError as e:
        for violation in e.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return e.exit_status
    except LabError as e:
        logging.error(f"[Run] {type(e).__name__}: {e.detail}")
        return e.exit_status


if __name__ == "__main__":
    sys.exit(main())
