"""Agent runtime: enrollment flow, heartbeat/poll loop, command execution.

One control loop (`step`, or `run_forever` around it) heartbeats and picks
up directives; executions run on a bounded worker pool and report results
with retry. The activation pair is wiped from disk the moment enrollment
succeeds, and the grant file is owner-readable only.
"""
from __future__ import annotations

import json
import logging
import os
import signal
import stat
import subprocess
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .. import __version__
from ..config import env_overrides, parse_kv_file
from ..errors import FedplaneError
from .journal import Journal
from .local_sessions import LocalSessionManager
from .transport import HttpTransport, Transport, TransportError

logger = logging.getLogger(__name__)

API = "/v1"


class EnrollmentRejected(Exception):
    """The control plane refused the activation; terminal, do not retry."""


class AgentAuthError(Exception):
    """Our token stopped working (for example after a re-enrollment)."""


@dataclass
class AgentConfig:
    server_url: str = ""
    activation_id: str = ""
    activation_code: str = ""
    state_dir: str = ""
    heartbeat_interval_s: float = 5.0
    runtime: str = "mock"
    port_range_low: int = 36000
    port_range_high: int = 36999
    max_concurrent_sessions: int = 1
    max_workers: int = 4
    advertise_host: str = "127.0.0.1"
    enroll_attempts: int = 5

    @classmethod
    def load(
        cls,
        config_path: Optional[str] = None,
        use_env: bool = True,
        **overrides,
    ) -> "AgentConfig":
        values: dict[str, str] = {}
        if config_path:
            values.update(parse_kv_file(config_path))
        if use_env:
            values.update(env_overrides("FEDPLANE_AGENT_"))
        values.update({k: str(v) for k, v in overrides.items() if v is not None})
        cfg = cls()
        for name in (
            "server_url",
            "activation_id",
            "activation_code",
            "state_dir",
            "runtime",
            "advertise_host",
        ):
            if name in values:
                setattr(cfg, name, values[name])
        for name in ("heartbeat_interval_s",):
            if name in values:
                setattr(cfg, name, float(values[name]))
        for name in (
            "port_range_low",
            "port_range_high",
            "max_concurrent_sessions",
            "max_workers",
            "enroll_attempts",
        ):
            if name in values:
                setattr(cfg, name, int(values[name]))
        return cfg

    def write(self, path: str | Path) -> None:
        """Persist the running configuration, never the activation pair."""
        lines = [
            "# fedplane agent configuration",
            f"server_url = {self.server_url}",
            f"state_dir = {self.state_dir}",
            f"heartbeat_interval_s = {self.heartbeat_interval_s}",
            f"runtime = {self.runtime}",
            f"port_range_low = {self.port_range_low}",
            f"port_range_high = {self.port_range_high}",
            f"max_concurrent_sessions = {self.max_concurrent_sessions}",
            f"max_workers = {self.max_workers}",
            f"advertise_host = {self.advertise_host}",
        ]
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class CommandOutcome:
    exit_status: Optional[int]
    output: str
    timed_out: bool = False
    detail: Optional[dict] = None


def execute_command(argv: list, timeout_s: float) -> CommandOutcome:
    """Run a child in its own process group; on timeout the whole group is
    killed so nothing is orphaned."""
    try:
        proc = subprocess.Popen(
            argv,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            start_new_session=True,
        )
    except (OSError, ValueError) as exc:
        return CommandOutcome(exit_status=127, output=f"spawn failed: {exc}")
    try:
        out, _ = proc.communicate(timeout=timeout_s)
        return CommandOutcome(
            exit_status=proc.returncode, output=out.decode(errors="replace")
        )
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        out, _ = proc.communicate()
        return CommandOutcome(
            exit_status=None,
            output=(out or b"").decode(errors="replace"),
            timed_out=True,
        )


def collect_metrics() -> dict:
    """Resident/host memory and CPU; absent values are simply omitted."""
    metrics: dict = {}
    try:
        import psutil

        process = psutil.Process()
        metrics["agent_memory_mb"] = process.memory_info().rss / (1024 * 1024)
        metrics["host_memory_mb"] = psutil.virtual_memory().used / (1024 * 1024)
        metrics["cpu_percent"] = psutil.cpu_percent(interval=None)
    except Exception:  # psutil missing or a probe failed
        pass
    return metrics


class AgentRuntime:
    def __init__(
        self,
        config: AgentConfig,
        transport: Optional[Transport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not config.server_url:
            raise FedplaneError("VALIDATION", "server_url is required")
        if not config.state_dir:
            raise FedplaneError("VALIDATION", "state_dir is required")
        self.config = config
        self.state_dir = Path(config.state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.transport = transport or HttpTransport(config.server_url)
        self._sleep = sleep
        self.journal = Journal(self.state_dir / "journal.jsonl")
        self.sessions = LocalSessionManager(
            self.journal,
            runtime=config.runtime,
            port_range=(config.port_range_low, config.port_range_high),
            max_concurrent=config.max_concurrent_sessions,
            advertise_host=config.advertise_host,
        )
        self.node_id: Optional[str] = None
        self._token: Optional[str] = None
        self._pool = ThreadPoolExecutor(
            max_workers=config.max_workers, thread_name_prefix="agent-worker"
        )
        self._inflight: set[Future] = set()
        self._inflight_lock = threading.Lock()
        self._load_grant()

    # -- grant persistence ----------------------------------------------------

    @property
    def grant_path(self) -> Path:
        return self.state_dir / "grant.json"

    def _load_grant(self) -> None:
        if self.grant_path.exists():
            grant = json.loads(self.grant_path.read_text())
            self.node_id = grant["node_id"]
            self._token = grant["agent_token"]

    def _store_grant(self, node_id: str, token: str) -> None:
        self.node_id, self._token = node_id, token
        fd = os.open(
            self.grant_path,
            os.O_WRONLY | os.O_CREAT | os.O_TRUNC,
            stat.S_IRUSR | stat.S_IWUSR,
        )
        with os.fdopen(fd, "w") as fh:
            json.dump({"node_id": node_id, "agent_token": token}, fh)
        os.chmod(self.grant_path, stat.S_IRUSR | stat.S_IWUSR)

    def _wipe_activation(self, config_path: Optional[str]) -> None:
        """Remove the single-use pair from memory and from any config file."""
        self.config.activation_id = ""
        self.config.activation_code = ""
        if config_path and Path(config_path).exists():
            self.config.write(config_path)

    # -- enrollment -------------------------------------------------------------

    def enroll(self, config_path: Optional[str] = None) -> str:
        """Consume the activation pair and persist the resulting grant.

        Transport failures retry with exponential backoff, a REJECTED
        response is terminal, and an existing grant short-circuits so the
        deployment script can be re-run safely.
        """
        if self._token is not None:
            logger.info("already enrolled as node %s", self.node_id)
            self._wipe_activation(config_path)
            return self.node_id  # type: ignore[return-value]
        if not self.config.activation_id or not self.config.activation_code:
            raise FedplaneError(
                "VALIDATION", "activation_id and activation_code are required"
            )
        payload = {
            "activation_id": self.config.activation_id,
            "activation_code": self.config.activation_code,
            "agent_version": __version__,
            "host_facts": {"pid": os.getpid(), "cwd": os.getcwd()},
        }
        delay = 0.5
        last_error: Optional[Exception] = None
        for attempt in range(1, self.config.enroll_attempts + 1):
            try:
                reply = self.transport.post(f"{API}/agent/enroll", payload)
            except TransportError as exc:
                last_error = exc
                logger.warning(
                    "enroll attempt %d/%d failed: %s",
                    attempt,
                    self.config.enroll_attempts,
                    exc,
                )
                if attempt < self.config.enroll_attempts:
                    self._sleep(delay)
                    delay *= 2
                continue
            if reply.ok:
                self._store_grant(reply.body["node_id"], reply.body["agent_token"])
                if "heartbeat_interval_s" in reply.body:
                    self.config.heartbeat_interval_s = float(
                        reply.body["heartbeat_interval_s"]
                    )
                self._wipe_activation(config_path)
                logger.info("enrolled as node %s", self.node_id)
                return self.node_id  # type: ignore[return-value]
            raise EnrollmentRejected(reply.body.get("message", "activation rejected"))
        raise TransportError(f"enrollment failed after retries: {last_error}")

    # -- heartbeat loop --------------------------------------------------------------

    def step(self) -> int:
        """One heartbeat: report metrics, accept directives, hand them to the
        worker pool. Returns the number of directives received."""
        if self._token is None:
            raise FedplaneError("VALIDATION", "agent is not enrolled")
        payload = {"metrics": collect_metrics(), "agent_version": __version__}
        try:
            reply = self.transport.post(
                f"{API}/agent/heartbeat", payload, token=self._token
            )
        except TransportError as exc:
            logger.warning("heartbeat failed: %s", exc)
            return 0
        if reply.status_code == 401:
            raise AgentAuthError(reply.body.get("message", "token rejected"))
        if not reply.ok:
            logger.warning("heartbeat rejected: %s", reply.body)
            return 0
        commands = reply.body.get("commands", [])
        for command in commands:
            self._submit(command)
        return len(commands)

    def _submit(self, command: dict) -> None:
        future = self._pool.submit(self._run_directive, command)
        with self._inflight_lock:
            self._inflight.add(future)
        future.add_done_callback(self._discard_future)

    def _discard_future(self, future: Future) -> None:
        with self._inflight_lock:
            self._inflight.discard(future)
        exc = future.exception()
        if exc is not None:
            logger.error("directive worker crashed: %s", exc)

    def _run_directive(self, command: dict) -> None:
        kind = command.get("kind", "EXEC")
        try:
            if kind == "EXEC":
                outcome = execute_command(
                    command.get("argv", []), command.get("timeout_s", 60.0)
                )
            elif kind == "SESSION_START":
                outcome = self._start_session(command.get("session") or {})
            elif kind == "SESSION_STOP":
                outcome = self._stop_session(command.get("session") or {})
            else:
                outcome = CommandOutcome(
                    exit_status=1, output=f"unknown directive {kind}"
                )
        except Exception as exc:  # a crashed directive still gets a result
            logger.exception("directive %s crashed", command.get("command_id"))
            outcome = CommandOutcome(exit_status=1, output=f"agent error: {exc}")
        self._report(command["command_id"], outcome)

    def _start_session(self, payload: dict) -> CommandOutcome:
        try:
            session, url = self.sessions.start_session(
                payload["session_id"],
                payload.get("image_ref", ""),
                payload.get("port_hint"),
            )
        except FedplaneError as exc:
            return CommandOutcome(
                exit_status=1, output=exc.message, detail={"error_code": exc.code}
            )
        return CommandOutcome(
            exit_status=0, output="session running", detail={"access_url": url}
        )

    def _stop_session(self, payload: dict) -> CommandOutcome:
        try:
            self.sessions.stop_session(payload["session_id"])
        except FedplaneError as exc:
            return CommandOutcome(
                exit_status=1, output=exc.message, detail={"error_code": exc.code}
            )
        return CommandOutcome(exit_status=0, output="session stopped")

    def _report(self, command_id: str, outcome: CommandOutcome) -> None:
        """Deliver the result exactly once: retry transport failures, and
        treat an ALREADY_TERMINAL reply as confirmation that an earlier
        attempt landed."""
        payload = {
            "command_id": command_id,
            "exit_status": outcome.exit_status,
            "output": outcome.output,
            "timed_out": outcome.timed_out,
            "detail": outcome.detail,
        }
        delay = 0.2
        for attempt in range(8):
            try:
                reply = self.transport.post(
                    f"{API}/agent/result", payload, token=self._token
                )
            except TransportError as exc:
                logger.warning("result report for %s failed: %s", command_id, exc)
                self._sleep(delay)
                delay = min(delay * 2, 2.0)
                continue
            if reply.ok or reply.error_code == "ALREADY_TERMINAL":
                return
            logger.error(
                "result for %s permanently rejected: %s", command_id, reply.body
            )
            return
        logger.error("result for %s undelivered after retries", command_id)

    def drain(self, timeout_s: float = 30.0) -> bool:
        """Wait until every in-flight directive has finished and reported."""
        deadline = time.time() + timeout_s
        while time.time() < deadline:
            with self._inflight_lock:
                if not self._inflight:
                    return True
            time.sleep(0.01)
        return False

    def run_forever(self, stop: Optional[threading.Event] = None) -> None:
        stop = stop or threading.Event()
        while not stop.is_set():
            try:
                self.step()
            except AgentAuthError:
                logger.error("agent token rejected; exiting heartbeat loop")
                raise
            stop.wait(self.config.heartbeat_interval_s)

    def close(self, abandon_sessions: bool = False) -> None:
        self._pool.shutdown(wait=True)
        self.sessions.close(abandon=abandon_sessions)
        closer = getattr(self.transport, "close", None)
        if closer is not None:
            closer()
