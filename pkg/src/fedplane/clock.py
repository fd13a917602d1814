"""Injectable time source.

All modules take a zero-arg callable returning epoch seconds, so tests and
the harness can drive liveness, expiry, and latency logic with a manual
clock while production uses time.time.
"""
from __future__ import annotations

import threading
import time
from datetime import datetime, timezone
from typing import Callable

Clock = Callable[[], float]

system_clock: Clock = time.time


class ManualClock:
    """Controllable clock. `auto_advance` makes successive readings strictly
    increasing (deterministically), so derived durations are never zero."""

    def __init__(self, start: float = 1_700_000_000.0, auto_advance: float = 0.0):
        self._now = float(start)
        self._auto = float(auto_advance)
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            now = self._now
            self._now += self._auto
            return now

    def advance(self, seconds: float) -> None:
        with self._lock:
            self._now += seconds

    def set(self, now: float) -> None:
        with self._lock:
            self._now = float(now)


def iso_utc(epoch: float) -> str:
    """Epoch seconds → ISO-8601 UTC string (second precision is enough for
    wire payloads; raw floats stay internal)."""
    return datetime.fromtimestamp(epoch, tz=timezone.utc).isoformat()


def parse_utc(text: str) -> float:
    """ISO-8601 string → epoch seconds; naive stamps are taken as UTC."""
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()
