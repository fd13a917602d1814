"""Shared fixtures: a control plane on a temp directory, a manual clock,
and the acceptance-summary reporting hook."""
from __future__ import annotations

import socket
import threading

import pytest
from hypothesis import settings

from fedplane.clock import ManualClock
from fedplane.config import PlaneConfig
from fedplane.plane import ControlPlane
from fedplane.store import Role, Store

settings.register_profile("ci", deadline=None, max_examples=50)
settings.load_profile("ci")


START_EPOCH = 1_700_000_000.0


@pytest.fixture
def clock():
    # Tiny auto-advance keeps time strictly increasing (as any real clock
    # does) so derived durations are never exactly zero.
    return ManualClock(start=START_EPOCH, auto_advance=1e-6)


@pytest.fixture
def plane(tmp_path, clock):
    config = PlaneConfig(
        db_path=str(tmp_path / "plane.db"), blob_root=str(tmp_path / "blobs")
    )
    plane = ControlPlane(config, clock=clock)
    yield plane
    plane.close()


@pytest.fixture
def store(plane) -> Store:
    return plane.store


@pytest.fixture
def users(store):
    """One user of each role, keyed by role name (passwords are the
    lowercase role name)."""
    return {
        "admin": store.create_user("admin", "admin", Role.ADMIN),
        "owner": store.create_user("owner", "owner", Role.OWNER),
        "experimenter": store.create_user("experimenter", "experimenter", Role.EXPERIMENTER),
    }


from helpers import free_port  # noqa: E402


# -- live HTTP server (for CLI / footprint tests) ---------------------------


class LiveServer:
    def __init__(self, plane):
        import uvicorn

        from fedplane.gateway import create_app

        self.plane = plane
        self.port = free_port()
        self.base_url = f"http://127.0.0.1:{self.port}"
        plane.config.gateway.server_url = self.base_url
        config = uvicorn.Config(
            create_app(plane), host="127.0.0.1", port=self.port, log_level="error"
        )
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def start(self):
        self.thread.start()
        import time

        deadline = time.time() + 10
        while not self.server.started:
            if time.time() > deadline:
                raise RuntimeError("uvicorn did not start")
            time.sleep(0.02)
        return self

    def stop(self):
        self.server.should_exit = True
        self.thread.join(timeout=10)


@pytest.fixture
def live_server(tmp_path):
    """Real uvicorn server over a wall-clock plane."""
    import time as _time

    config = PlaneConfig(
        db_path=str(tmp_path / "live.db"), blob_root=str(tmp_path / "live-blobs")
    )
    plane = ControlPlane(config, clock=_time.time)
    plane.store.create_user("admin", "admin", Role.ADMIN)
    plane.store.create_user("owner", "owner", Role.OWNER)
    plane.store.create_user("experimenter", "experimenter", Role.EXPERIMENTER)
    server = LiveServer(plane).start()
    yield server
    server.stop()
    plane.close()


# -- acceptance summary ------------------------------------------------------

_acceptance_results: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        _acceptance_results[name] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and report.failed:
        _acceptance_results[name] = "ERROR"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(_acceptance_results):
        outcome = _acceptance_results[name]
        terminalreporter.write_line(f"{outcome}  {name}")
