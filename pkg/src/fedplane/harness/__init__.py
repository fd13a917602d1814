"""Desk-scale measurement harness: an in-process control plane plus
simulated agents exercising the full integrate -> enroll -> reserve ->
connect -> disconnect pipeline, with latency reporting."""

from .report import LatencyReport, render_report  # noqa: F401
from .runner import run_scenario  # noqa: F401
from .scenario import ScenarioSpec  # noqa: F401
