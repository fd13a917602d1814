"""In-process transport shims for simulated agents.

The agents talk to the real gateway app through an ASGI test client, so
the exact production code paths run; network behavior (link delay, loss)
is injected here at the transport boundary, never inside the modules.
"""
from __future__ import annotations

import random
import threading
import time
from typing import Callable, Optional

from ..agent.transport import TransportError, TransportReply


class InProcessTransport:
    """Agent transport over a FastAPI/Starlette test client."""

    def __init__(self, client):
        self._client = client

    def post(self, path: str, payload: dict, token: Optional[str] = None) -> TransportReply:
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        response = self._client.post(path, json=payload, headers=headers)
        try:
            body = response.json()
        except ValueError:
            body = {}
        return TransportReply(status_code=response.status_code, body=body)


class FaultyTransport:
    """Wraps a transport with sampled link delay and request/response loss.

    `wait` defaults to time.sleep; the virtual-time runner passes the manual
    clock's advance so a delay moves simulated time instead of real time.
    Drops raise TransportError either before the call (request lost) or
    after it (response lost, server side effects already applied).
    """

    def __init__(
        self,
        inner,
        rng: random.Random,
        delay_s: float = 0.0,
        delay_max_s: float = 0.0,
        drop_rate: float = 0.0,
        wait: Callable[[float], None] = time.sleep,
    ):
        self.inner = inner
        self.rng = rng
        self.delay_s = delay_s
        self.delay_max_s = delay_max_s
        self.drop_rate = drop_rate
        self.wait = wait
        self._lock = threading.Lock()
        self.calls = 0
        self.dropped = 0

    def set_drop_rate(self, rate: float) -> None:
        self.drop_rate = rate

    def _sample_delay(self) -> float:
        if self.delay_max_s > self.delay_s:
            with self._lock:
                return self.rng.uniform(self.delay_s, self.delay_max_s)
        return self.delay_s

    def _drops(self) -> bool:
        if self.drop_rate <= 0.0:
            return False
        with self._lock:
            return self.rng.random() < self.drop_rate

    def post(self, path: str, payload: dict, token: Optional[str] = None) -> TransportReply:
        with self._lock:
            self.calls += 1
        delay = self._sample_delay()
        if delay > 0:
            self.wait(delay)
        if self._drops():
            with self._lock:
                self.dropped += 1
            # 50/50 whether the request or the response is the one lost.
            with self._lock:
                response_lost = self.rng.random() < 0.5
            if not response_lost:
                raise TransportError(f"injected drop (request) on {path}")
            self.inner.post(path, payload, token)
            raise TransportError(f"injected drop (response) on {path}")
        return self.inner.post(path, payload, token)
