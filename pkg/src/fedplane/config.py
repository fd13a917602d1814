"""Dataclass configuration for every control-plane module.

Config files use a plain `key = value` format: one assignment per line,
`#` comments, blank lines ignored. Environment variables override file
values; the server reads the `FEDPLANE_` prefix and the agent reads
`FEDPLANE_AGENT_` (see agent.runtime).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Parse `key = value` lines; later keys win."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def env_overrides(prefix: str) -> dict[str, str]:
    """FEDPLANE_FOO_BAR=x -> {"foo_bar": "x"}."""
    out = {}
    for key, value in os.environ.items():
        if key.startswith(prefix):
            out[key[len(prefix):].lower()] = value
    return out


def coerce_into(cls, values: dict[str, str]):
    """Build a dataclass from string values, coercing per field type."""
    kwargs = {}
    by_name = {f.name: f for f in fields(cls)}
    for key, raw in values.items():
        f = by_name.get(key)
        if f is None:
            continue
        if f.type in ("int", int):
            kwargs[key] = int(raw)
        elif f.type in ("float", float):
            kwargs[key] = float(raw)
        elif f.type in ("bool", bool):
            kwargs[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            kwargs[key] = raw
    return cls(**kwargs)


@dataclass
class EngineConfig:
    """Fleet engine knobs: activation lifetime, heartbeat-derived liveness
    thresholds, and command handling."""

    activation_ttl_s: float = 24 * 3600.0
    heartbeat_interval_s: float = 5.0
    degraded_after_missed: int = 3
    offline_after_missed: int = 12
    stale_after_s: float = 31 * 86400.0
    command_output_cap: int = 64 * 1024
    # Engineering budget for agent resident memory; the dashboard draws its
    # reference line here and the acceptance suite holds agents to it.
    agent_memory_budget_mb: float = 200.0
    # Extra slack past a command's own timeout before a DELIVERED command
    # with no result is written off as TIMED_OUT.
    delivered_grace_s: float = 30.0


@dataclass
class SchedulerConfig:
    max_duration_s: float = 8 * 3600.0
    instant_access: bool = True
    instant_window_s: float = 30 * 60.0


@dataclass
class SessionConfig:
    deploy_timeout_s: float = 120.0
    max_active_per_node: int = 1
    # Grace past reservation end before live sessions are torn down.
    reservation_teardown_grace_s: float = 60.0


@dataclass
class RepoConfig:
    max_artifact_bytes: int = 512 * 1024 * 1024


@dataclass
class GatewayConfig:
    token_ttl_s: float = 12 * 3600.0
    server_url: str = "http://127.0.0.1:8080"
    ui_dir: str = ""
    # Dev bootstrap credentials; the server CLI warns when the default
    # password is left in place.
    bootstrap_admin_username: str = "admin"
    bootstrap_admin_password: str = ""


@dataclass
class PlaneConfig:
    """Aggregate config for one control-plane process."""

    db_path: str = "fedplane.db"
    blob_root: str = "fedplane-blobs"
    listen: str = "127.0.0.1:8080"
    sweep_interval_s: float = 2.0
    engine: EngineConfig = field(default_factory=EngineConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    sessions: SessionConfig = field(default_factory=SessionConfig)
    repos: RepoConfig = field(default_factory=RepoConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)

    @classmethod
    def load(
        cls, config_path: Optional[str] = None, env_prefix: str = "FEDPLANE_"
    ) -> "PlaneConfig":
        """File values first, then environment overrides.

        Nested fields use dotted keys in the file (engine.heartbeat_interval_s)
        and underscores in the environment (FEDPLANE_ENGINE_HEARTBEAT_INTERVAL_S).
        """
        flat: dict[str, str] = {}
        if config_path:
            flat.update(parse_kv_file(config_path))
        for key, value in env_overrides(env_prefix).items():
            flat[key] = value
        cfg = cls()
        sections = {
            "engine": EngineConfig,
            "scheduler": SchedulerConfig,
            "sessions": SessionConfig,
            "repos": RepoConfig,
            "gateway": GatewayConfig,
        }
        top: dict[str, str] = {}
        nested: dict[str, dict[str, str]] = {name: {} for name in sections}
        for key, value in flat.items():
            key = key.replace(".", "_").lower()
            for name in sections:
                if key.startswith(name + "_"):
                    nested[name][key[len(name) + 1 :]] = value
                    break
            else:
                top[key] = value
        base = coerce_into(cls, top)
        cfg.db_path = base.db_path
        cfg.blob_root = base.blob_root
        cfg.listen = base.listen
        cfg.sweep_interval_s = base.sweep_interval_s
        for name, section_cls in sections.items():
            setattr(cfg, name, coerce_into(section_cls, nested[name]))
        return cfg
