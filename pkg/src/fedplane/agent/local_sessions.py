"""Local session runtimes on the control interface.

Two interchangeable runtimes: MOCK serves a built-in placeholder page from
a thread (so the whole system is testable with no container engine), and
CONTAINER shells out to docker. The manager owns capacity, port
allocation from the configured range, and journal-backed recovery.
"""
from __future__ import annotations

import http.server
import logging
import shutil
import socket
import subprocess
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from ..errors import FedplaneError
from .journal import Journal

logger = logging.getLogger(__name__)

PLACEHOLDER_PAGE = b"""\
<!doctype html>
<html><head><title>fedplane session</title></head>
<body><h1>Remote session placeholder</h1>
<p>This page stands in for the interactive (VNC) endpoint of a deployed
session container.</p></body></html>
"""


class LocalSessionState(str, Enum):
    PULLING = "PULLING"
    RUNNING = "RUNNING"
    STOPPED = "STOPPED"
    FAILED = "FAILED"


@dataclass
class LocalSession:
    session_id: str
    image_ref: str
    state: LocalSessionState
    access_port: int
    started_at: float


class _PlaceholderHandler(http.server.BaseHTTPRequestHandler):
    def do_GET(self):  # noqa: N802 (stdlib naming)
        self.send_response(200)
        self.send_header("Content-Type", "text/html")
        self.send_header("Content-Length", str(len(PLACEHOLDER_PAGE)))
        self.end_headers()
        self.wfile.write(PLACEHOLDER_PAGE)

    def log_message(self, *args):
        pass


def port_is_free(port: int, host: str = "127.0.0.1") -> bool:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((host, port))
            return True
        except OSError:
            return False


def port_is_serving(port: int, host: str = "127.0.0.1", timeout_s: float = 0.2) -> bool:
    try:
        with socket.create_connection((host, port), timeout=timeout_s):
            return True
    except OSError:
        return False


class MockRuntime:
    """Placeholder HTTP server per session, served from a daemon thread."""

    def __init__(self):
        self._servers: dict[str, http.server.HTTPServer] = {}

    def start(self, session_id: str, image_ref: str, port: int) -> None:
        server = http.server.HTTPServer(("127.0.0.1", port), _PlaceholderHandler)
        thread = threading.Thread(
            target=server.serve_forever, name=f"mock-session-{port}", daemon=True
        )
        thread.start()
        self._servers[session_id] = server

    def stop(self, session_id: str) -> None:
        server = self._servers.pop(session_id, None)
        if server is not None:
            server.shutdown()
            server.server_close()

    def stop_all(self) -> None:
        for session_id in list(self._servers):
            self.stop(session_id)


class ContainerRuntime:
    """Docker-backed runtime: containers are named after the session so a
    restarted agent can still stop them."""

    def __init__(self):
        if shutil.which("docker") is None:
            raise FedplaneError("IMAGE_UNAVAILABLE", "docker binary not found on host")

    def start(self, session_id: str, image_ref: str, port: int) -> None:
        result = subprocess.run(
            [
                "docker",
                "run",
                "--detach",
                "--rm",
                "--name",
                f"fedplane-{session_id}",
                "-p",
                f"{port}:5900",
                image_ref,
            ],
            capture_output=True,
            text=True,
        )
        if result.returncode != 0:
            raise FedplaneError(
                "IMAGE_UNAVAILABLE", result.stderr.strip() or "docker run failed"
            )

    def stop(self, session_id: str) -> None:
        subprocess.run(
            ["docker", "stop", f"fedplane-{session_id}"], capture_output=True
        )

    def stop_all(self) -> None:
        pass


class LocalSessionManager:
    def __init__(
        self,
        journal: Journal,
        runtime: str = "mock",
        port_range: tuple[int, int] = (36000, 36999),
        max_concurrent: int = 1,
        advertise_host: str = "127.0.0.1",
    ):
        self.journal = journal
        self.port_range = port_range
        self.max_concurrent = max_concurrent
        self.advertise_host = advertise_host
        self._lock = threading.Lock()
        self._sessions: dict[str, LocalSession] = {}
        if runtime == "mock":
            self.runtime = MockRuntime()
        elif runtime == "container":
            self.runtime = ContainerRuntime()
        else:
            raise FedplaneError("VALIDATION", f"unknown runtime {runtime!r}")
        self._recover()

    # -- recovery -----------------------------------------------------------

    def _recover(self) -> None:
        """Rebuild session state from the journal; sessions recorded RUNNING
        whose port no longer answers died with the previous process and are
        reconciled to STOPPED."""
        for record in self.journal.replay():
            if record["event"] == "session_start":
                self._sessions[record["session_id"]] = LocalSession(
                    session_id=record["session_id"],
                    image_ref=record["image_ref"],
                    state=LocalSessionState.RUNNING,
                    access_port=record["port"],
                    started_at=record["at"],
                )
            elif record["event"] == "session_stop":
                session = self._sessions.get(record["session_id"])
                if session is not None:
                    session.state = LocalSessionState.STOPPED
        for session in self._sessions.values():
            if session.state is LocalSessionState.RUNNING and not port_is_serving(
                session.access_port
            ):
                session.state = LocalSessionState.STOPPED
                self.journal.append(
                    "session_stop", session_id=session.session_id, reconciled=True
                )

    # -- operations ------------------------------------------------------------

    def running(self) -> list[LocalSession]:
        with self._lock:
            return [
                s for s in self._sessions.values()
                if s.state is LocalSessionState.RUNNING
            ]

    def _candidate_ports(self, port_hint: Optional[int]):
        low, high = self.port_range
        start = port_hint if port_hint and low <= port_hint <= high else low
        for port in range(start, high + 1):
            if any(
                s.access_port == port and s.state is LocalSessionState.RUNNING
                for s in self._sessions.values()
            ):
                continue
            yield port

    def start_session(
        self, session_id: str, image_ref: str, port_hint: Optional[int] = None
    ) -> tuple[LocalSession, str]:
        """Launch the session runtime and return (session, access URL).

        The bind itself is the port allocation: a candidate lost to another
        process (or another agent in this one) just advances to the next
        port, so there is no check-then-bind race.
        """
        import errno
        import time

        with self._lock:
            existing = self._sessions.get(session_id)
            if existing is not None and existing.state is LocalSessionState.RUNNING:
                url = f"http://{self.advertise_host}:{existing.access_port}/"
                return existing, url
            if len([s for s in self._sessions.values() if s.state is LocalSessionState.RUNNING]) >= self.max_concurrent:
                raise FedplaneError(
                    "CAPACITY",
                    f"host already runs {self.max_concurrent} session(s)",
                )
            session = LocalSession(
                session_id=session_id,
                image_ref=image_ref,
                state=LocalSessionState.PULLING,
                access_port=0,
                started_at=time.time(),
            )
            started = False
            for port in self._candidate_ports(port_hint):
                if not port_is_free(port):
                    continue
                try:
                    self.runtime.start(session_id, image_ref, port)
                except OSError as exc:
                    if exc.errno == errno.EADDRINUSE:
                        continue  # lost the bind race; try the next port
                    session.state = LocalSessionState.FAILED
                    self._sessions[session_id] = session
                    raise FedplaneError("DEPLOY_FAILED", str(exc))
                except FedplaneError:
                    session.state = LocalSessionState.FAILED
                    self._sessions[session_id] = session
                    raise
                session.access_port = port
                started = True
                break
            if not started:
                low, high = self.port_range
                raise FedplaneError(
                    "PORT_CONFLICT", f"no free port in range {low}-{high}"
                )
            session.state = LocalSessionState.RUNNING
            self._sessions[session_id] = session
            self.journal.append(
                "session_start",
                session_id=session_id,
                image_ref=image_ref,
                port=session.access_port,
            )
            return session, f"http://{self.advertise_host}:{session.access_port}/"

    def stop_session(self, session_id: str) -> LocalSession:
        """Stop and release the port; stopping twice is a no-op success."""
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise FedplaneError("NOT_FOUND", f"no local session {session_id}")
            if session.state is not LocalSessionState.RUNNING:
                session.state = LocalSessionState.STOPPED
                return session
            self.runtime.stop(session_id)
            session.state = LocalSessionState.STOPPED
            self.journal.append("session_stop", session_id=session_id)
            return session

    def close(self, abandon: bool = False) -> None:
        """Shut down runtimes. `abandon` simulates process death: servers go
        away but no stop events are journaled, so recovery gets exercised."""
        if abandon:
            self.runtime.stop_all()
            return
        with self._lock:
            for session in self._sessions.values():
                if session.state is LocalSessionState.RUNNING:
                    self.runtime.stop(session.session_id)
                    session.state = LocalSessionState.STOPPED
                    self.journal.append("session_stop", session_id=session.session_id)
