"""Command-line entry point: ``ringlock <subcommand> [options]``.

Exit status is 0 on success, 1 when a run fails or a ``--check`` threshold
is missed, and 2 for usage and configuration errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

from ringlock.harness import (
    ConfigError,
    RunFailure,
    ScenarioName,
    load_config,
    parse_config,
    run_scenario,
    schema,
)

OUT_ENV_VAR = "RINGLOCK_OUT"
DEFAULT_OUT = "ringlock-out"

_SUBCOMMANDS = {
    "align": ScenarioName.STATIC_ALIGN,
    "lock": ScenarioName.TEMP_WALK_LOCK,
    "calibrate": ScenarioName.TUNING_CURVE_CAL,
    "fringe": ScenarioName.FRINGE_SWEEP,
    "power": ScenarioName.POWER_SWEEP,
    "audit": ScenarioName.CRITICAL_POINT_AUDIT,
}

_HELP = {
    "align": "cold-start static alignment statistics",
    "lock": "dynamic stabilization under a temperature walk or crosstalk sweep",
    "calibrate": "tuning-curve calibration sweeps",
    "fringe": "locked and uncorrected two-photon fringes",
    "power": "pair rate versus pump power",
    "audit": "multi-start unique-minimum audit and alignment oracle",
    "schema": "print the configuration schema with defaults",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # usage errors exit 2, as argparse does
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON configuration document")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument(
        "--out",
        type=Path,
        help=f"output directory (default ${OUT_ENV_VAR} or ./{DEFAULT_OUT}/<scenario>)",
    )
    common.add_argument("--check", action="store_true",
                        help="exit 1 unless every acceptance check passes")
    common.add_argument("--repeats", type=int, help="override the configured repeat count")
    common.add_argument("--quiet", action="store_true", help="print nothing on success")

    parser = _Parser(prog="ringlock", description="Microring lock and photon-source simulator")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in (*_SUBCOMMANDS, "schema"):
        p = sub.add_parser(name, parents=[common], help=_HELP[name])
        if name == "lock":
            p.add_argument(
                "--disturbance",
                choices=("temperature", "crosstalk"),
                help="disturbance to track (default from config, else temperature)",
            )
    return parser


def _scenario_name(args: argparse.Namespace, config_scenario: str | None) -> ScenarioName:
    if args.command != "lock":
        return _SUBCOMMANDS[args.command]
    if args.disturbance == "crosstalk":
        return ScenarioName.CROSSTALK_LOCK
    if args.disturbance == "temperature":
        return ScenarioName.TEMP_WALK_LOCK
    if config_scenario == ScenarioName.CROSSTALK_LOCK.value:
        return ScenarioName.CROSSTALK_LOCK
    return ScenarioName.TEMP_WALK_LOCK


def _config_scenario(path: Path | None) -> str | None:
    if path is None:
        return None
    try:
        doc = json.loads(path.read_text() or "{}")
    except (OSError, json.JSONDecodeError):
        return None  # load_config reports it properly
    return doc.get("scenario") if isinstance(doc, dict) else None


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.command == "schema":
        print(json.dumps(schema(), indent=2))
        return 0

    name = _scenario_name(args, _config_scenario(args.config))
    try:
        scenario = load_config(args.config, name)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.repeats is not None:
            overrides["repeats"] = args.repeats
        if overrides:
            scenario = parse_config({**scenario.to_dict(), **overrides}, name)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for path, msg in exc.errors:
            print(f"  {path or '<document>'}: {msg}", file=sys.stderr)
        return 2

    out = args.out
    if out is None:
        root = os.environ.get(OUT_ENV_VAR) or DEFAULT_OUT
        out = Path(root) / name.value
    try:
        report = run_scenario(scenario, out)
    except RunFailure as exc:
        print(f"run failed: {exc} (partial results in {out})", file=sys.stderr)
        return 1

    if not args.quiet:
        print(f"{name.value} seed={scenario.seed} config_hash={report.config_hash} -> {out}")
        for key, value in report.summary.items():
            if isinstance(value, (int, float, str)) or value is None:
                print(f"  {key}: {value}")
        for key, chk in report.checks.items():
            print(f"  check {key}: {'PASS' if chk['passed'] else 'FAIL'}")
    if args.check and not report.passed:
        if args.quiet:
            failed = [k for k, c in report.checks.items() if not c["passed"]]
            print("checks failed: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
