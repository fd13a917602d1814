"""Composition root: one store, all control-plane modules wired together.

Construct a ControlPlane, then serve it through the gateway app or drive it
directly (the harness does both). `sweep()` is the single periodic
maintenance pass; `recover()` runs once at startup after a restart.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional

from .clock import Clock, system_clock
from .config import PlaneConfig
from .federation import FederationEngine
from .repos import ArtifactRepository
from .scheduler import Scheduler
from .sessions import SessionOrchestrator
from .store import Store


class ControlPlane:
    def __init__(
        self,
        config: Optional[PlaneConfig] = None,
        clock: Clock = system_clock,
    ):
        self.config = config or PlaneConfig()
        self.clock = clock
        Path(self.config.db_path).parent.mkdir(parents=True, exist_ok=True)
        self.store = Store(self.config.db_path, clock=clock)
        self.engine = FederationEngine(
            self.store,
            self.config.engine,
            server_url=self.config.gateway.server_url,
        )
        self.scheduler = Scheduler(self.store, self.config.scheduler)
        self.sessions = SessionOrchestrator(
            self.store, self.engine, self.scheduler, self.config.sessions
        )
        self.repos = ArtifactRepository(
            self.store, self.config.blob_root, self.config.repos
        )

    def sweep(self, now: Optional[float] = None) -> dict:
        now = self.clock() if now is None else now
        stats = {}
        stats.update(self.engine.sweep(now))
        stats.update(self.scheduler.sweep(now))
        stats.update(self.sessions.sweep(now))
        return stats

    def recover(self, now: Optional[float] = None) -> dict:
        return self.engine.recover(now)

    def close(self) -> None:
        self.store.close()
