"""Fleet engine: single-use activations, one-shot deployment scripts,
agent liveness tracking, and the run-command queue.

Enrollment consumes an activation exactly once even under concurrent
attempts (the check-and-consume runs inside one serializable transaction),
and all three failure modes come back as a single REJECTED error so a
caller cannot probe which part was wrong; the real reason goes to the
audit log only.
"""
from __future__ import annotations

import hashlib
import json
import logging
import secrets
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .clock import Clock
from .config import EngineConfig
from .errors import FedplaneError
from .ids import new_id
from .store import FederationState, Store

logger = logging.getLogger(__name__)


class Liveness(str, Enum):
    ONLINE = "ONLINE"
    DEGRADED = "DEGRADED"
    OFFLINE = "OFFLINE"


class CommandStatus(str, Enum):
    QUEUED = "QUEUED"
    DELIVERED = "DELIVERED"
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"
    TIMED_OUT = "TIMED_OUT"


TERMINAL_STATUSES = {
    CommandStatus.SUCCEEDED,
    CommandStatus.FAILED,
    CommandStatus.TIMED_OUT,
}


class DirectiveKind(str, Enum):
    EXEC = "EXEC"
    SESSION_START = "SESSION_START"
    SESSION_STOP = "SESSION_STOP"


@dataclass
class ActivationRecord:
    activation_id: str
    activation_code: str
    node_id: str
    issued_at: float
    expires_at: float
    consumed: bool = False
    consumed_at: Optional[float] = None


@dataclass
class DeploymentScript:
    node_id: str
    script_text: str
    checksum: str
    generated_at: float


@dataclass
class RunCommand:
    command_id: str
    node_id: str
    argv: list
    timeout_s: float
    status: CommandStatus
    kind: DirectiveKind = DirectiveKind.EXEC
    output: str = ""
    truncated: bool = False
    exit_status: Optional[int] = None
    offline_warning: bool = False
    session_payload: Optional[dict] = None


@dataclass
class AgentState:
    node_id: str
    agent_version: str
    last_heartbeat_at: float
    liveness: Liveness
    metrics: dict = field(default_factory=dict)
    pending_commands: int = 0


@dataclass
class EnrollmentGrant:
    node_id: str
    agent_token: str


@dataclass
class HeartbeatReply:
    acknowledged: bool
    commands: list
    node_state: FederationState


def compute_liveness(
    age_s: float, interval_s: float, degraded_after: int, offline_after: int
) -> Liveness:
    """Pure liveness function of heartbeat age and thresholds.

    A heartbeat counts as missed once a full interval has elapsed, so the
    boundary ages (3 and 12 missed at defaults) flip the state.
    """
    if age_s >= offline_after * interval_s:
        return Liveness.OFFLINE
    if age_s >= degraded_after * interval_s:
        return Liveness.DEGRADED
    return Liveness.ONLINE


# POSIX one-shot install script. Placeholders: server_url, activation_id,
# activation_code, node_label. The enroll step is the only consuming step,
# so re-running before consumption is harmless; an existing grant short-
# circuits to success.
SCRIPT_TEMPLATE = """\
#!/bin/sh
# One-shot enrollment for control interface: {node_label}
# Copy this entire script and run it once on the host to be federated.
set -eu
(set -o pipefail) 2>/dev/null && set -o pipefail || true
STATE_DIR="${{FEDPLANE_AGENT_STATE_DIR:-$HOME/.fedplane-agent}}"
if [ -f "$STATE_DIR/grant.json" ]; then
    echo "already enrolled (grant present in $STATE_DIR)"; exit 0
fi
# Refresh the host package index so the agent's interpreter deps resolve.
if command -v apt-get >/dev/null 2>&1; then
    (sudo apt-get update -y || apt-get update -y) >/dev/null 2>&1 || true
fi
# Install the agent.
python3 -m pip install --user --quiet fedplane || pip3 install --user --quiet fedplane
AGENT="$(command -v fedplane-agent || echo "$HOME/.local/bin/fedplane-agent")"
# Enroll with the embedded single-use activation, then start the agent.
"$AGENT" enroll \\
    --server-url {server_url} \\
    --activation-id {activation_id} \\
    --activation-code {activation_code} \\
    --state-dir "$STATE_DIR"
nohup "$AGENT" run --config "$STATE_DIR/config" >"$STATE_DIR/agent.log" 2>&1 &
echo "agent started; node will report as federated shortly"
"""


class FederationEngine:
    """Issues activations, enrolls agents, tracks liveness, queues commands."""

    def __init__(
        self,
        store: Store,
        config: Optional[EngineConfig] = None,
        server_url: str = "http://127.0.0.1:8080",
    ):
        self.store = store
        self.config = config or EngineConfig()
        self.server_url = server_url.rstrip("/")
        self.clock: Clock = store.clock
        # Wiring points for the session orchestrator: called inside the same
        # transaction as the status change.
        self.on_delivered: dict[DirectiveKind, Callable[[dict, float], None]] = {}
        self.on_result: dict[
            DirectiveKind, Callable[[dict, CommandStatus, str, Optional[dict], float], None]
        ] = {}

    # -- activations ------------------------------------------------------

    def issue_activation(self, node_id: str) -> ActivationRecord:
        """Create a fresh single-use activation, revoking any live one.

        Allowed for REGISTERED / ACTIVATION_ISSUED nodes and for OFFLINE
        nodes whose agent needs a reinstall; a FEDERATED node with a live
        agent must not be re-keyed.
        """
        now = self.clock()
        with self.store.write() as conn:
            node = self.store.get_node(node_id)
            if node.federation_state is FederationState.FEDERATED:
                raise FedplaneError(
                    "ILLEGAL_STATE", f"node {node_id} is already federated"
                )
            conn.execute(
                "UPDATE activations SET revoked = 1 WHERE node_id = ? AND consumed = 0",
                (node_id,),
            )
            record = ActivationRecord(
                activation_id=new_id(),
                activation_code=secrets.token_urlsafe(32),  # 256 bits entropy
                node_id=node_id,
                issued_at=now,
                expires_at=now + self.config.activation_ttl_s,
            )
            conn.execute(
                "INSERT INTO activations (activation_id, node_id, activation_code, "
                "issued_at, expires_at) VALUES (?, ?, ?, ?, ?)",
                (
                    record.activation_id,
                    record.node_id,
                    record.activation_code,
                    record.issued_at,
                    record.expires_at,
                ),
            )
            if node.federation_state is FederationState.REGISTERED:
                self.store.set_node_state(node_id, FederationState.ACTIVATION_ISSUED)
        logger.info("activation issued for node %s (id=%s)", node_id, record.activation_id)
        return record

    def _live_activation(self, conn, node_id: str):
        return conn.execute(
            "SELECT * FROM activations WHERE node_id = ? AND consumed = 0 AND revoked = 0 "
            "ORDER BY issued_at DESC LIMIT 1",
            (node_id,),
        ).fetchone()

    def generate_script(self, node_id: str) -> DeploymentScript:
        """Render the one-command deployment script for the node's live
        activation. Regenerating before consumption embeds the same pair."""
        node = self.store.get_node(node_id)
        row = self._live_activation(self.store.read(), node_id)
        if row is None:
            raise FedplaneError(
                "NO_ACTIVATION", f"node {node_id} has no live activation"
            )
        if row["expires_at"] <= self.clock():
            raise FedplaneError(
                "EXPIRED", f"activation for node {node_id} has expired"
            )
        text = SCRIPT_TEMPLATE.format(
            node_label=node.public_identifier,
            server_url=self.server_url,
            activation_id=row["activation_id"],
            activation_code=row["activation_code"],
        )
        return DeploymentScript(
            node_id=node_id,
            script_text=text,
            checksum=hashlib.sha256(text.encode()).hexdigest(),
            generated_at=self.clock(),
        )

    # -- enrollment ---------------------------------------------------------

    def enroll(
        self,
        activation_id: str,
        activation_code: str,
        agent_version: str = "",
        host_facts: Optional[dict] = None,
    ) -> EnrollmentGrant:
        """Consume an activation and admit the agent to the fleet.

        Exactly one concurrent attempt can win; everyone else sees the same
        opaque REJECTED error regardless of why.
        """
        now = self.clock()
        with self.store.write() as conn:
            row = conn.execute(
                "SELECT * FROM activations WHERE activation_id = ?", (activation_id,)
            ).fetchone()
            reason = None
            if row is None or row["revoked"]:
                reason = "INVALID_CODE"
            elif not secrets.compare_digest(
                row["activation_code"], activation_code or ""
            ):
                reason = "INVALID_CODE"
            elif row["consumed"]:
                reason = "ALREADY_CONSUMED"
            elif row["expires_at"] <= now:
                reason = "EXPIRED"
            if reason is not None:
                raise FedplaneError(
                    "REJECTED", "activation rejected", audit_detail=reason
                )
            conn.execute(
                "UPDATE activations SET consumed = 1, consumed_at = ? WHERE activation_id = ?",
                (now, activation_id),
            )
            node_id = row["node_id"]
            node = self.store.get_node(node_id)
            if node.federation_state is not FederationState.FEDERATED:
                self.store.set_node_state(node_id, FederationState.FEDERATED)
            token = secrets.token_urlsafe(32)
            conn.execute("DELETE FROM agents WHERE node_id = ?", (node_id,))
            conn.execute(
                "INSERT INTO agents (node_id, token_hash, agent_version, enrolled_at, "
                "last_heartbeat_at, metrics) VALUES (?, ?, ?, ?, ?, ?)",
                (
                    node_id,
                    _token_hash(token),
                    agent_version,
                    now,
                    now,
                    json.dumps({"host_facts": host_facts or {}}),
                ),
            )
        logger.info("node %s federated (agent %s)", node_id, agent_version or "?")
        return EnrollmentGrant(node_id=node_id, agent_token=token)

    def _agent_by_token(self, conn, agent_token: str):
        row = conn.execute(
            "SELECT * FROM agents WHERE token_hash = ?", (_token_hash(agent_token or ""),)
        ).fetchone()
        if row is None:
            raise FedplaneError("UNAUTHORIZED", "unknown or stale agent token")
        return row

    # -- heartbeat / commands -------------------------------------------------

    def heartbeat(
        self,
        agent_token: str,
        metrics: Optional[dict] = None,
        agent_version: Optional[str] = None,
    ) -> HeartbeatReply:
        """Record liveness and hand the agent its queued directives (FIFO)."""
        now = self.clock()
        with self.store.write() as conn:
            agent = self._agent_by_token(conn, agent_token)
            node_id = agent["node_id"]
            stored = json.loads(agent["metrics"])
            if metrics:
                stored.update({k: v for k, v in metrics.items() if v is not None})
            conn.execute(
                "UPDATE agents SET last_heartbeat_at = ?, metrics = ?, agent_version = ? "
                "WHERE node_id = ?",
                (
                    now,
                    json.dumps(stored),
                    agent_version or agent["agent_version"],
                    node_id,
                ),
            )
            node = self.store.get_node(node_id)
            if node.federation_state is FederationState.OFFLINE:
                node = self.store.set_node_state(node_id, FederationState.FEDERATED)
            rows = conn.execute(
                "SELECT * FROM commands WHERE node_id = ? AND status = ? ORDER BY seq",
                (node_id, CommandStatus.QUEUED.value),
            ).fetchall()
            commands = []
            for row in rows:
                conn.execute(
                    "UPDATE commands SET status = ?, delivered_at = ? WHERE command_id = ?",
                    (CommandStatus.DELIVERED.value, now, row["command_id"]),
                )
                cmd = _row_to_command(row)
                cmd.status = CommandStatus.DELIVERED
                commands.append(cmd)
                hook = self.on_delivered.get(cmd.kind)
                if hook is not None:
                    hook(cmd.session_payload or {}, now)
        return HeartbeatReply(
            acknowledged=True, commands=commands, node_state=node.federation_state
        )

    def dispatch_command(
        self, node_id: str, argv: list, timeout_s: float = 60.0
    ) -> RunCommand:
        """Queue a shell command for a federated node. An OFFLINE node still
        accepts the command (it drains on return) but the entry is flagged."""
        return self._dispatch(
            node_id, DirectiveKind.EXEC, argv=argv, timeout_s=timeout_s
        )

    def dispatch_directive(
        self,
        node_id: str,
        kind: DirectiveKind,
        session_payload: dict,
        timeout_s: float,
    ) -> RunCommand:
        """Queue a session start/stop directive (used by the orchestrator)."""
        return self._dispatch(
            node_id, kind, session_payload=session_payload, timeout_s=timeout_s
        )

    def _dispatch(
        self,
        node_id: str,
        kind: DirectiveKind,
        argv: Optional[list] = None,
        session_payload: Optional[dict] = None,
        timeout_s: float = 60.0,
    ) -> RunCommand:
        now = self.clock()
        with self.store.write() as conn:
            node = self.store.get_node(node_id)
            if node.federation_state in (
                FederationState.REGISTERED,
                FederationState.ACTIVATION_ISSUED,
            ):
                raise FedplaneError(
                    "NODE_OFFLINE", f"node {node_id} has never enrolled an agent"
                )
            offline = node.federation_state is FederationState.OFFLINE
            cmd = RunCommand(
                command_id=new_id(),
                node_id=node_id,
                argv=list(argv or []),
                timeout_s=timeout_s,
                status=CommandStatus.QUEUED,
                kind=kind,
                offline_warning=offline,
                session_payload=session_payload,
            )
            conn.execute(
                "INSERT INTO commands (command_id, node_id, kind, argv, timeout_s, "
                "session_payload, status, offline_warning, created_at) "
                "VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    cmd.command_id,
                    node_id,
                    kind.value,
                    json.dumps(cmd.argv),
                    timeout_s,
                    json.dumps(session_payload) if session_payload else None,
                    cmd.status.value,
                    int(offline),
                    now,
                ),
            )
        if offline:
            logger.warning(
                "command %s queued for OFFLINE node %s; it will drain when the node returns",
                cmd.command_id,
                node_id,
            )
        return cmd

    def report_result(
        self,
        agent_token: str,
        command_id: str,
        exit_status: Optional[int],
        output: str,
        timed_out: bool = False,
        detail: Optional[dict] = None,
    ) -> None:
        """Record a command's terminal state; the first report wins and
        duplicates are rejected with ALREADY_TERMINAL."""
        now = self.clock()
        with self.store.write() as conn:
            agent = self._agent_by_token(conn, agent_token)
            row = conn.execute(
                "SELECT * FROM commands WHERE command_id = ?", (command_id,)
            ).fetchone()
            if row is None or row["node_id"] != agent["node_id"]:
                raise FedplaneError(
                    "UNKNOWN_COMMAND", f"command {command_id} is not known for this node"
                )
            if CommandStatus(row["status"]) in TERMINAL_STATUSES:
                raise FedplaneError(
                    "ALREADY_TERMINAL", f"command {command_id} already has a result"
                )
            if timed_out:
                status = CommandStatus.TIMED_OUT
            elif exit_status == 0:
                status = CommandStatus.SUCCEEDED
            else:
                status = CommandStatus.FAILED
            cap = self.config.command_output_cap
            truncated = len(output.encode()) > cap
            if truncated:
                output = output.encode()[:cap].decode(errors="replace")
            conn.execute(
                "UPDATE commands SET status = ?, exit_status = ?, output = ?, "
                "truncated = ?, completed_at = ? WHERE command_id = ?",
                (status.value, exit_status, output, int(truncated), now, command_id),
            )
            hook = self.on_result.get(DirectiveKind(row["kind"]))
            if hook is not None:
                payload = json.loads(row["session_payload"] or "{}")
                hook(payload, status, output, detail, now)

    def get_command(self, command_id: str) -> RunCommand:
        row = self.store.read().execute(
            "SELECT * FROM commands WHERE command_id = ?", (command_id,)
        ).fetchone()
        if row is None:
            raise FedplaneError("UNKNOWN_COMMAND", f"command {command_id} not found")
        return _row_to_command(row)

    def list_commands(
        self, node_id: Optional[str] = None, status: Optional[CommandStatus] = None
    ) -> list:
        sql, args = "SELECT * FROM commands WHERE 1=1", []
        if node_id:
            sql += " AND node_id = ?"
            args.append(node_id)
        if status:
            sql += " AND status = ?"
            args.append(CommandStatus(status).value)
        rows = self.store.read().execute(sql + " ORDER BY seq", args).fetchall()
        return [_row_to_command(r) for r in rows]

    # -- fleet view -------------------------------------------------------------

    def agent_state(self, node_id: str) -> AgentState:
        row = self.store.read().execute(
            "SELECT * FROM agents WHERE node_id = ?", (node_id,)
        ).fetchone()
        if row is None:
            raise FedplaneError("NOT_FOUND", f"node {node_id} has no enrolled agent")
        return self._row_to_agent(row)

    def _row_to_agent(self, row) -> AgentState:
        age = self.clock() - row["last_heartbeat_at"]
        cfg = self.config
        metrics = json.loads(row["metrics"])
        metrics.pop("host_facts", None)
        pending = self.store.read().execute(
            "SELECT COUNT(*) AS n FROM commands WHERE node_id = ? AND status = ?",
            (row["node_id"], CommandStatus.QUEUED.value),
        ).fetchone()["n"]
        return AgentState(
            node_id=row["node_id"],
            agent_version=row["agent_version"],
            last_heartbeat_at=row["last_heartbeat_at"],
            liveness=compute_liveness(
                age,
                cfg.heartbeat_interval_s,
                cfg.degraded_after_missed,
                cfg.offline_after_missed,
            ),
            metrics=metrics,
            pending_commands=pending,
        )

    def fleet_dashboard(self) -> list[dict]:
        """Read-only join of nodes, agent liveness, testbed, and lab, in
        deterministic node-ID order. Never includes credentials."""
        conn = self.store.read()
        now = self.clock()
        rows = conn.execute(
            "SELECT n.node_id, n.public_identifier, n.federation_state, n.namespace, "
            "t.testbed_id, t.public_name AS testbed_name, l.lab_id, l.name AS lab_name, "
            "a.agent_version, a.last_heartbeat_at, a.metrics "
            "FROM nodes n JOIN testbeds t ON n.testbed_id = t.testbed_id "
            "JOIN labs l ON t.lab_id = l.lab_id "
            "LEFT JOIN agents a ON a.node_id = n.node_id "
            "WHERE n.deleted_at IS NULL ORDER BY n.node_id"
        ).fetchall()
        entries = []
        for row in rows:
            enrolled = row["last_heartbeat_at"] is not None
            age = (now - row["last_heartbeat_at"]) if enrolled else None
            liveness = None
            if enrolled:
                liveness = compute_liveness(
                    age,
                    self.config.heartbeat_interval_s,
                    self.config.degraded_after_missed,
                    self.config.offline_after_missed,
                ).value
            metrics = json.loads(row["metrics"]) if row["metrics"] else {}
            metrics.pop("host_facts", None)
            entries.append(
                {
                    "node_id": row["node_id"],
                    "public_identifier": row["public_identifier"],
                    "federation_state": row["federation_state"],
                    "namespace": row["namespace"],
                    "testbed": {"testbed_id": row["testbed_id"], "public_name": row["testbed_name"]},
                    "lab": {"lab_id": row["lab_id"], "name": row["lab_name"]},
                    "agent_version": row["agent_version"] if enrolled else None,
                    "liveness": liveness,
                    "last_heartbeat_age_s": age,
                    "metrics": metrics,
                    "stale": bool(enrolled and age >= self.config.stale_after_s),
                }
            )
        return entries

    # -- maintenance --------------------------------------------------------------

    def sweep(self, now: Optional[float] = None) -> dict:
        """Periodic pass: derive liveness into node states and write off
        DELIVERED commands whose results never arrived."""
        now = self.clock() if now is None else now
        cfg = self.config
        marked_offline = timed_out = 0
        with self.store.write() as conn:
            for row in conn.execute("SELECT node_id, last_heartbeat_at FROM agents"):
                liveness = compute_liveness(
                    now - row["last_heartbeat_at"],
                    cfg.heartbeat_interval_s,
                    cfg.degraded_after_missed,
                    cfg.offline_after_missed,
                )
                node = self.store.get_node(row["node_id"])
                if (
                    liveness is Liveness.OFFLINE
                    and node.federation_state is FederationState.FEDERATED
                ):
                    self.store.set_node_state(row["node_id"], FederationState.OFFLINE)
                    marked_offline += 1
            stale = conn.execute(
                "SELECT * FROM commands WHERE status = ? AND delivered_at + timeout_s + ? < ?",
                (CommandStatus.DELIVERED.value, cfg.delivered_grace_s, now),
            ).fetchall()
            for row in stale:
                conn.execute(
                    "UPDATE commands SET status = ?, completed_at = ?, "
                    "output = 'no result before timeout' WHERE command_id = ?",
                    (CommandStatus.TIMED_OUT.value, now, row["command_id"]),
                )
                timed_out += 1
                hook = self.on_result.get(DirectiveKind(row["kind"]))
                if hook is not None:
                    payload = json.loads(row["session_payload"] or "{}")
                    hook(payload, CommandStatus.TIMED_OUT, "", None, now)
        return {"nodes_marked_offline": marked_offline, "commands_timed_out": timed_out}

    def recover(self, now: Optional[float] = None) -> dict:
        """Startup pass after a restart: QUEUED/DELIVERED rows survived; any
        DELIVERED command already past its timeout becomes TIMED_OUT."""
        now = self.clock() if now is None else now
        timed_out = 0
        with self.store.write() as conn:
            rows = conn.execute(
                "SELECT * FROM commands WHERE status = ? AND delivered_at + timeout_s < ?",
                (CommandStatus.DELIVERED.value, now),
            ).fetchall()
            for row in rows:
                conn.execute(
                    "UPDATE commands SET status = ?, completed_at = ?, "
                    "output = 'lost across restart' WHERE command_id = ?",
                    (CommandStatus.TIMED_OUT.value, now, row["command_id"]),
                )
                timed_out += 1
                hook = self.on_result.get(DirectiveKind(row["kind"]))
                if hook is not None:
                    payload = json.loads(row["session_payload"] or "{}")
                    hook(payload, CommandStatus.TIMED_OUT, "", None, now)
        return {"commands_timed_out": timed_out}


def _token_hash(token: str) -> str:
    return hashlib.sha256(token.encode()).hexdigest()


def _row_to_command(row) -> RunCommand:
    return RunCommand(
        command_id=row["command_id"],
        node_id=row["node_id"],
        argv=json.loads(row["argv"]) if row["argv"] else [],
        timeout_s=row["timeout_s"],
        status=CommandStatus(row["status"]),
        kind=DirectiveKind(row["kind"]),
        output=row["output"],
        truncated=bool(row["truncated"]),
        exit_status=row["exit_status"],
        offline_warning=bool(row["offline_warning"]),
        session_payload=json.loads(row["session_payload"])
        if row["session_payload"]
        else None,
    )
