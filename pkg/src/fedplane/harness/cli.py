"""Harness command line.

    fedplane-harness run --spec scenario.spec --out report.csv [--format table]

Prints the rendered report to stdout and, with --out, writes the CSV form
next to it.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import FedplaneError
from .report import render_report
from .runner import run_scenario
from .scenario import ScenarioSpec


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedplane-harness")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute a scenario spec")
    run.add_argument("--spec", required=True, help="scenario spec file (key = value)")
    run.add_argument("--out", help="write the CSV report here")
    run.add_argument("--format", default="table", help="stdout format: table or csv")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING)
    args = build_parser().parse_args(argv)
    try:
        spec = ScenarioSpec.from_file(args.spec)
        report = run_scenario(spec)
        sys.stdout.write(render_report(report, args.format))
        if args.out:
            Path(args.out).write_text(render_report(report, "csv"))
    except FedplaneError as exc:
        print(f"error [{exc.code}]: {exc.message}", file=sys.stderr)
        for detail in exc.details:
            print(f"  - {detail}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
