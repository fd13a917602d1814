"""Remote-session orchestrator.

"Connect" resolves the node's container image (node binding wins over
testbed binding), rides the agent command channel with a start directive,
and flips the session READY when the agent reports the access URL back.
Access latency is ready_at - requested_at and is aggregated for the
latency report.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .config import SessionConfig
from .errors import FedplaneError
from .federation import CommandStatus, DirectiveKind, FederationEngine, Liveness
from .ids import new_id
from .scheduler import ReservationStatus, Scheduler
from .store import Relation, Role, Store

logger = logging.getLogger(__name__)


class SessionState(str, Enum):
    REQUESTED = "REQUESTED"
    DEPLOYING = "DEPLOYING"
    READY = "READY"
    ENDED = "ENDED"
    FAILED = "FAILED"


ACTIVE_SESSION_STATES = {
    SessionState.REQUESTED,
    SessionState.DEPLOYING,
    SessionState.READY,
}


@dataclass
class ImageBinding:
    binding_id: str
    target_kind: str  # "node" | "testbed"
    target_id: str
    image_ref: str
    description: str = ""


@dataclass
class Session:
    session_id: str
    reservation_id: str
    node_id: str
    user_id: str
    state: SessionState
    access_url: Optional[str] = None
    failure: Optional[str] = None
    requested_at: float = 0.0
    ready_at: Optional[float] = None
    ended_at: Optional[float] = None

    @property
    def access_latency_s(self) -> Optional[float]:
        if self.ready_at is None:
            return None
        return self.ready_at - self.requested_at


@dataclass
class LatencyStats:
    average_s: float
    maximum_s: float
    minimum_s: float
    count: int


class SessionOrchestrator:
    def __init__(
        self,
        store: Store,
        engine: FederationEngine,
        scheduler: Scheduler,
        config: Optional[SessionConfig] = None,
    ):
        self.store = store
        self.engine = engine
        self.scheduler = scheduler
        self.config = config or SessionConfig()
        self.clock = store.clock
        engine.on_delivered[DirectiveKind.SESSION_START] = self._start_delivered
        engine.on_result[DirectiveKind.SESSION_START] = self._start_result
        engine.on_result[DirectiveKind.SESSION_STOP] = self._stop_result
        scheduler.on_cancelled = self.teardown_for_reservation

    # -- image bindings ---------------------------------------------------

    def bind_image(
        self,
        owner_id: str,
        target_kind: str,
        target_id: str,
        image_ref: str,
        description: str = "",
    ) -> ImageBinding:
        """Associate a container image with a node or a whole testbed. Only
        the owner of the containing lab (or an admin) may bind."""
        if target_kind not in ("node", "testbed"):
            raise FedplaneError("VALIDATION", "target_kind must be node or testbed")
        if not image_ref.strip():
            raise FedplaneError("VALIDATION", "image_ref must be non-empty")
        with self.store.write() as conn:
            if target_kind == "node":
                node = self.store.get_node(target_id)
                testbed = self.store.get_testbed(node.testbed_id)
            else:
                testbed = self.store.get_testbed(target_id)
            lab = self.store.get_lab(testbed.lab_id)
            user = self.store.get_user(owner_id)
            if lab.owner_user_id != owner_id and user.role is not Role.ADMIN:
                raise FedplaneError(
                    "FORBIDDEN", "only the lab owner may bind images for it"
                )
            binding = ImageBinding(
                binding_id=new_id(),
                target_kind=target_kind,
                target_id=target_id,
                image_ref=image_ref,
                description=description,
            )
            conn.execute(
                "INSERT INTO image_bindings (binding_id, target_kind, target_id, image_ref, description) "
                "VALUES (?, ?, ?, ?, ?) "
                "ON CONFLICT (target_id) DO UPDATE SET image_ref = excluded.image_ref, "
                "description = excluded.description",
                (
                    binding.binding_id,
                    target_kind,
                    target_id,
                    image_ref,
                    description,
                ),
            )
        return binding

    def resolve_image(self, node_id: str) -> Optional[ImageBinding]:
        """Node-level binding wins; otherwise fall back to the testbed's."""
        node = self.store.get_node(node_id)
        conn = self.store.read()
        for target_id in (node_id, node.testbed_id):
            row = conn.execute(
                "SELECT * FROM image_bindings WHERE target_id = ?", (target_id,)
            ).fetchone()
            if row is not None:
                return ImageBinding(
                    binding_id=row["binding_id"],
                    target_kind=row["target_kind"],
                    target_id=row["target_id"],
                    image_ref=row["image_ref"],
                    description=row["description"],
                )
        return None

    # -- connect / disconnect -----------------------------------------------

    def connect(self, user_id: str, node_id: str) -> Session:
        """Start a remote session; returns immediately in REQUESTED and turns
        READY once the agent reports the access URL."""
        now = self.clock()
        with self.store.write() as conn:
            node = self.store.get_node(node_id)
            decision = self.scheduler.access_check(user_id, node_id, now)
            if not decision.allowed:
                raise FedplaneError(
                    "NOT_AUTHORIZED", "no reservation covers this node right now"
                )
            try:
                agent = self.engine.agent_state(node_id)
            except FedplaneError:
                raise FedplaneError(
                    "NODE_OFFLINE", f"node {node_id} has no enrolled agent"
                )
            if agent.liveness is not Liveness.ONLINE:
                raise FedplaneError(
                    "NODE_OFFLINE", f"node agent is {agent.liveness.value}"
                )
            binding = self.resolve_image(node_id)
            if binding is None:
                raise FedplaneError(
                    "NO_IMAGE_BINDING", f"no image bound for node {node_id}"
                )
            active = conn.execute(
                "SELECT COUNT(*) AS n FROM sessions WHERE node_id = ? AND state IN (?, ?, ?)",
                (
                    node_id,
                    SessionState.REQUESTED.value,
                    SessionState.DEPLOYING.value,
                    SessionState.READY.value,
                ),
            ).fetchone()["n"]
            if active >= self.config.max_active_per_node:
                raise FedplaneError(
                    "CAPACITY", f"node {node_id} already has an active session"
                )
            session = Session(
                session_id=new_id(),
                reservation_id=decision.reservation_id or "",
                node_id=node_id,
                user_id=user_id,
                state=SessionState.REQUESTED,
                requested_at=now,
            )
            conn.execute(
                "INSERT INTO sessions (session_id, reservation_id, node_id, user_id, "
                "state, requested_at) VALUES (?, ?, ?, ?, ?, ?)",
                (
                    session.session_id,
                    session.reservation_id,
                    node_id,
                    user_id,
                    session.state.value,
                    now,
                ),
            )
            self.store._add_edge(conn, session.session_id, node_id, Relation.SESSION_ON_NODE)
            self.engine.dispatch_directive(
                node_id,
                DirectiveKind.SESSION_START,
                {"session_id": session.session_id, "image_ref": binding.image_ref},
                timeout_s=self.config.deploy_timeout_s,
            )
        return session

    def disconnect(self, session_id: str, user_id: str) -> Session:
        """End a READY session (idempotent for already-ended ones); the stop
        directive stays queued even if the agent is unreachable."""
        now = self.clock()
        with self.store.write() as conn:
            session = self.get_session(session_id)
            user = self.store.get_user(user_id)
            if session.user_id != user_id and user.role is not Role.ADMIN:
                raise FedplaneError(
                    "FORBIDDEN", "only the session owner or an admin may disconnect"
                )
            if session.state is SessionState.ENDED:
                return session
            if session.state not in (SessionState.READY,):
                raise FedplaneError(
                    "ILLEGAL_STATE", f"session is {session.state.value}, not READY"
                )
            self._end_session(conn, session, now)
        return self.get_session(session_id)

    def _end_session(self, conn, session: Session, now: float) -> None:
        conn.execute(
            "UPDATE sessions SET state = ?, ended_at = ? WHERE session_id = ?",
            (SessionState.ENDED.value, now, session.session_id),
        )
        self.engine.dispatch_directive(
            session.node_id,
            DirectiveKind.SESSION_STOP,
            {"session_id": session.session_id},
            timeout_s=self.config.deploy_timeout_s,
        )

    def teardown_for_reservation(self, reservation_id: str, now: float) -> int:
        """End every live session belonging to a reservation (cancellation
        and expiry both route here)."""
        ended = 0
        with self.store.write() as conn:
            rows = conn.execute(
                "SELECT session_id FROM sessions WHERE reservation_id = ? AND state IN (?, ?, ?)",
                (
                    reservation_id,
                    SessionState.REQUESTED.value,
                    SessionState.DEPLOYING.value,
                    SessionState.READY.value,
                ),
            ).fetchall()
            for row in rows:
                session = self.get_session(row["session_id"])
                if session.state is SessionState.READY:
                    self._end_session(conn, session, now)
                else:
                    # Never became ready; mark it failed and stop anything
                    # the agent may have started meanwhile.
                    conn.execute(
                        "UPDATE sessions SET state = ?, ended_at = ?, failure = ? "
                        "WHERE session_id = ?",
                        (
                            SessionState.FAILED.value,
                            now,
                            "reservation ended before deploy completed",
                            session.session_id,
                        ),
                    )
                    self.engine.dispatch_directive(
                        session.node_id,
                        DirectiveKind.SESSION_STOP,
                        {"session_id": session.session_id},
                        timeout_s=self.config.deploy_timeout_s,
                    )
                ended += 1
        return ended

    # -- engine callbacks --------------------------------------------------

    def _start_delivered(self, payload: dict, now: float) -> None:
        with self.store.write() as conn:
            conn.execute(
                "UPDATE sessions SET state = ? WHERE session_id = ? AND state = ?",
                (
                    SessionState.DEPLOYING.value,
                    payload.get("session_id", ""),
                    SessionState.REQUESTED.value,
                ),
            )

    def _start_result(
        self,
        payload: dict,
        status: CommandStatus,
        output: str,
        detail: Optional[dict],
        now: float,
    ) -> None:
        session_id = payload.get("session_id", "")
        with self.store.write() as conn:
            row = conn.execute(
                "SELECT state FROM sessions WHERE session_id = ?", (session_id,)
            ).fetchone()
            if row is None or SessionState(row["state"]) not in (
                SessionState.REQUESTED,
                SessionState.DEPLOYING,
            ):
                return  # late or duplicate report; session already settled
            if status is CommandStatus.SUCCEEDED and detail and detail.get("access_url"):
                conn.execute(
                    "UPDATE sessions SET state = ?, access_url = ?, ready_at = ? "
                    "WHERE session_id = ?",
                    (SessionState.READY.value, detail["access_url"], now, session_id),
                )
            else:
                reason = (detail or {}).get("error_code") or output or "agent deploy failed"
                conn.execute(
                    "UPDATE sessions SET state = ?, failure = ?, ended_at = ? "
                    "WHERE session_id = ?",
                    (SessionState.FAILED.value, reason, now, session_id),
                )
                logger.warning("session %s failed to deploy: %s", session_id, reason)

    def _stop_result(
        self,
        payload: dict,
        status: CommandStatus,
        output: str,
        detail: Optional[dict],
        now: float,
    ) -> None:
        # Sessions are already ENDED locally when the stop is queued; the
        # agent's confirmation needs no further state change.
        return

    # -- reads ------------------------------------------------------------------

    def get_session(self, session_id: str) -> Session:
        row = self.store.read().execute(
            "SELECT * FROM sessions WHERE session_id = ?", (session_id,)
        ).fetchone()
        if row is None:
            raise FedplaneError("NOT_FOUND", f"session {session_id} not found")
        return _row_to_session(row)

    def list_sessions(
        self, node_id: Optional[str] = None, state: Optional[SessionState] = None
    ) -> list:
        sql, args = "SELECT * FROM sessions WHERE 1=1", []
        if node_id:
            sql += " AND node_id = ?"
            args.append(node_id)
        if state:
            sql += " AND state = ?"
            args.append(SessionState(state).value)
        rows = self.store.read().execute(sql + " ORDER BY session_id", args).fetchall()
        return [_row_to_session(r) for r in rows]

    # -- latency -------------------------------------------------------------

    def _latency_rows(self, node_id: Optional[str], testbed_id: Optional[str]):
        sql = (
            "SELECT s.* FROM sessions s JOIN nodes n ON s.node_id = n.node_id "
            "WHERE s.ready_at IS NOT NULL"
        )
        args: list = []
        if node_id:
            sql += " AND s.node_id = ?"
            args.append(node_id)
        if testbed_id:
            sql += " AND n.testbed_id = ?"
            args.append(testbed_id)
        return self.store.read().execute(sql + " ORDER BY s.session_id", args).fetchall()

    def latency_stats(
        self, node_id: Optional[str] = None, testbed_id: Optional[str] = None
    ) -> Optional[LatencyStats]:
        """Exact arithmetic mean/max/min of access latency over sessions that
        reached READY; None when there are no samples."""
        rows = self._latency_rows(node_id, testbed_id)
        if not rows:
            return None
        samples = [r["ready_at"] - r["requested_at"] for r in rows]
        return LatencyStats(
            average_s=sum(samples) / len(samples),
            maximum_s=max(samples),
            minimum_s=min(samples),
            count=len(samples),
        )

    def latency_csv(
        self, node_id: Optional[str] = None, testbed_id: Optional[str] = None
    ) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["session_id", "node_id", "requested_at", "ready_at", "latency_s"])
        for row in self._latency_rows(node_id, testbed_id):
            writer.writerow(
                [
                    row["session_id"],
                    row["node_id"],
                    repr(row["requested_at"]),
                    repr(row["ready_at"]),
                    repr(row["ready_at"] - row["requested_at"]),
                ]
            )
        return buf.getvalue()

    # -- maintenance -----------------------------------------------------------

    def sweep(self, now: Optional[float] = None) -> dict:
        """Fail deploys stuck past the deadline and tear down sessions whose
        reservation ended more than the grace period ago."""
        now = self.clock() if now is None else now
        failed = torn_down = 0
        with self.store.write() as conn:
            rows = conn.execute(
                "SELECT session_id FROM sessions WHERE state IN (?, ?) AND requested_at + ? < ?",
                (
                    SessionState.REQUESTED.value,
                    SessionState.DEPLOYING.value,
                    self.config.deploy_timeout_s,
                    now,
                ),
            ).fetchall()
            for row in rows:
                conn.execute(
                    "UPDATE sessions SET state = ?, failure = ?, ended_at = ? "
                    "WHERE session_id = ?",
                    (
                        SessionState.FAILED.value,
                        "deploy timed out",
                        now,
                        row["session_id"],
                    ),
                )
                failed += 1
            grace = self.config.reservation_teardown_grace_s
            rows = conn.execute(
                "SELECT DISTINCT s.reservation_id FROM sessions s "
                "JOIN reservations r ON s.reservation_id = r.reservation_id "
                "WHERE s.state IN (?, ?, ?) AND r.end_at + ? < ?",
                (
                    SessionState.REQUESTED.value,
                    SessionState.DEPLOYING.value,
                    SessionState.READY.value,
                    grace,
                    now,
                ),
            ).fetchall()
            for row in rows:
                torn_down += self.teardown_for_reservation(row["reservation_id"], now)
        return {"sessions_deploy_failed": failed, "sessions_torn_down": torn_down}


def _row_to_session(row) -> Session:
    return Session(
        session_id=row["session_id"],
        reservation_id=row["reservation_id"],
        node_id=row["node_id"],
        user_id=row["user_id"],
        state=SessionState(row["state"]),
        access_url=row["access_url"],
        failure=row["failure"],
        requested_at=row["requested_at"],
        ready_at=row["ready_at"],
        ended_at=row["ended_at"],
    )
