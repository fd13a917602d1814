"""Scenario description for harness runs.

Spec files use the same `key = value` format as the rest of the system:

    labs = 1            # number of labs
    testbeds = 1        # testbeds per lab
    nodes = 2           # control interfaces per testbed
    session_count = 4   # connect/disconnect cycles, round-robin over nodes
    control_mode_mix = centralized   # centralized | distributed | mixed
    delay_ms = 0        # injected agent-link delay (fixed ...)
    delay_ms_max = 0    # ... or uniform in [delay_ms, delay_ms_max] when > delay_ms
    drop_rate = 0.0     # agent transport drop probability (command phase)
    command_count = 0   # extra exec commands to dispatch round-robin
    seed = 42
    time_mode = wall    # wall | virtual (virtual is deterministic)
    parallelism = 1     # concurrent node flows (forced to 1 under virtual)
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

from ..config import parse_kv_file
from ..errors import FedplaneError

CONTROL_MODE_MIXES = ("centralized", "distributed", "mixed")
TIME_MODES = ("wall", "virtual")


@dataclass
class ScenarioSpec:
    labs: int = 1
    testbeds: int = 1
    nodes: int = 1
    session_count: int = 1
    control_mode_mix: str = "centralized"
    delay_ms: float = 0.0
    delay_ms_max: float = 0.0
    drop_rate: float = 0.0
    command_count: int = 0
    seed: int = 0
    time_mode: str = "wall"
    parallelism: int = 1

    def validate(self) -> None:
        if min(self.labs, self.testbeds, self.nodes) < 1:
            raise FedplaneError("VALIDATION", "labs/testbeds/nodes counts must be >= 1")
        if self.session_count < 0 or self.command_count < 0:
            raise FedplaneError("VALIDATION", "counts must be >= 0")
        if self.delay_ms < 0 or self.delay_ms_max < 0:
            raise FedplaneError("VALIDATION", "delays must be >= 0")
        if not 0.0 <= self.drop_rate < 1.0:
            raise FedplaneError("VALIDATION", "drop_rate must be in [0, 1)")
        if self.control_mode_mix not in CONTROL_MODE_MIXES:
            raise FedplaneError(
                "VALIDATION",
                f"control_mode_mix must be one of {CONTROL_MODE_MIXES}",
            )
        if self.time_mode not in TIME_MODES:
            raise FedplaneError("VALIDATION", f"time_mode must be one of {TIME_MODES}")
        if self.parallelism < 1:
            raise FedplaneError("VALIDATION", "parallelism must be >= 1")

    @property
    def total_nodes(self) -> int:
        return self.labs * self.testbeds * self.nodes

    def echo(self) -> dict:
        return asdict(self)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScenarioSpec":
        values = parse_kv_file(path)
        spec = cls()
        for name, value in values.items():
            if not hasattr(spec, name):
                raise FedplaneError("VALIDATION", f"unknown scenario key {name!r}")
            current = getattr(spec, name)
            if isinstance(current, int):
                setattr(spec, name, int(value))
            elif isinstance(current, float):
                setattr(spec, name, float(value))
            else:
                setattr(spec, name, value)
        spec.validate()
        return spec
