"""Agent-side transport: how the agent reaches the control plane.

The agent only ever POSTs JSON and reads JSON back, so the surface is one
method. Tests and the harness substitute in-process or fault-injecting
implementations; production uses httpx over the network.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol


class TransportError(Exception):
    """The request never produced an HTTP response (connect/read failure)."""


@dataclass
class TransportReply:
    status_code: int
    body: dict

    @property
    def ok(self) -> bool:
        return 200 <= self.status_code < 300

    @property
    def error_code(self) -> str:
        return str(self.body.get("code", ""))


class Transport(Protocol):
    def post(self, path: str, payload: dict, token: Optional[str] = None) -> TransportReply:
        ...


class HttpTransport:
    def __init__(self, server_url: str, timeout_s: float = 10.0):
        import httpx

        self._client = httpx.Client(base_url=server_url.rstrip("/"), timeout=timeout_s)

    def post(self, path: str, payload: dict, token: Optional[str] = None) -> TransportReply:
        import httpx

        headers = {"Authorization": f"Bearer {token}"} if token else {}
        try:
            response = self._client.post(path, json=payload, headers=headers)
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        try:
            body = response.json()
        except ValueError:
            body = {}
        return TransportReply(status_code=response.status_code, body=body)

    def close(self) -> None:
        self._client.close()
