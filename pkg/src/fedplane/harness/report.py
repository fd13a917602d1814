"""Latency report structure and rendering.

The table layout mirrors the three-column Avg/Max/Min comparison format;
published baselines are rendered as clearly labeled reference rows next to
the measured numbers and are never asserted against.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

from ..errors import FedplaneError

# Published baseline rows (seconds): not measured here, shown for context.
REFERENCE_ROWS = (
    ("Automated federation (published reference, not reproduced)", 11.47, 12.59, 9.67),
    ("Manual federation (published reference, not reproduced)", 60.58, 75.97, 51.60),
)


@dataclass
class LatencyReport:
    samples: list = field(default_factory=list)  # sorted ascending, seconds
    scenario: dict = field(default_factory=dict)
    runtime_s: float = 0.0
    command_stats: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)  # names of passed invariants

    @property
    def count(self) -> int:
        return len(self.samples)

    @property
    def average_s(self) -> Optional[float]:
        return sum(self.samples) / len(self.samples) if self.samples else None

    @property
    def maximum_s(self) -> Optional[float]:
        return max(self.samples) if self.samples else None

    @property
    def minimum_s(self) -> Optional[float]:
        return min(self.samples) if self.samples else None

    def to_json(self) -> str:
        return json.dumps(
            {
                "samples": self.samples,
                "average_s": self.average_s,
                "maximum_s": self.maximum_s,
                "minimum_s": self.minimum_s,
                "count": self.count,
                "scenario": self.scenario,
                "runtime_s": self.runtime_s,
                "command_stats": self.command_stats,
                "checks": self.checks,
            },
            sort_keys=True,
        )


def _fmt(value: Optional[float]) -> str:
    return f"{value:.2f}" if value is not None else "-"


def render_report(report: LatencyReport, format: str = "table") -> str:
    if format == "table":
        return _render_table(report)
    if format == "csv":
        return _render_csv(report)
    raise FedplaneError("BAD_FORMAT", f"unknown report format {format!r}")


def _render_table(report: LatencyReport) -> str:
    label_width = max(len(r[0]) for r in REFERENCE_ROWS) + 2
    lines = ["Node access latency (seconds)", ""]
    header = f"{'Run':<{label_width}}{'Average':>9}{'Maximum':>9}{'Minimum':>9}"
    lines.append(header)
    lines.append("-" * len(header))
    measured = f"Measured (this run, {report.count} sessions)"
    lines.append(
        f"{measured:<{label_width}}{_fmt(report.average_s):>9}"
        f"{_fmt(report.maximum_s):>9}{_fmt(report.minimum_s):>9}"
    )
    for label, avg, mx, mn in REFERENCE_ROWS:
        lines.append(
            f"{label:<{label_width}}{_fmt(avg):>9}{_fmt(mx):>9}{_fmt(mn):>9}"
        )
    lines.append("")
    lines.append(f"runtime: {report.runtime_s:.3f}s  scenario: {report.scenario}")
    return "\n".join(lines) + "\n"


def _render_csv(report: LatencyReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["row", "label", "average_s", "maximum_s", "minimum_s", "count"])
    if report.count:
        writer.writerow(
            [
                "measured",
                "this run",
                repr(report.average_s),
                repr(report.maximum_s),
                repr(report.minimum_s),
                report.count,
            ]
        )
    for label, avg, mx, mn in REFERENCE_ROWS:
        writer.writerow(["reference", label, avg, mx, mn, ""])
    for i, sample in enumerate(report.samples):
        writer.writerow(["sample", str(i), repr(sample), "", "", ""])
    return buf.getvalue()
