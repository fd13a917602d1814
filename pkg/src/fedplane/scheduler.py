"""Reservation scheduler: validates requests against the master schedule.

Intervals are half-open [start, end) so back-to-back bookings abut without
conflict. Two intervals overlap iff max(starts) < min(ends); conflict
checking and insertion happen in one serializable transaction, so of two
concurrent conflicting requests exactly one commits.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .config import SchedulerConfig
from .errors import FedplaneError
from .ids import new_id
from .store import FederationState, Relation, Role, Store


class ReservationStatus(str, Enum):
    ACTIVE = "ACTIVE"
    CANCELLED = "CANCELLED"
    COMPLETED = "COMPLETED"


@dataclass
class Reservation:
    reservation_id: str
    user_id: str
    node_ids: list
    start_at: float
    end_at: float
    status: ReservationStatus
    created_at: float


@dataclass
class AccessDecision:
    allowed: bool
    reservation_id: Optional[str] = None


def intervals_overlap(a_start: float, a_end: float, b_start: float, b_end: float) -> bool:
    """Half-open interval intersection test."""
    return max(a_start, b_start) < min(a_end, b_end)


class Scheduler:
    def __init__(self, store: Store, config: Optional[SchedulerConfig] = None):
        self.store = store
        self.config = config or SchedulerConfig()
        self.clock = store.clock
        # Set by the session orchestrator so cancellation tears live
        # sessions down; takes (reservation_id, now).
        self.on_cancelled: Optional[Callable[[str, float], None]] = None

    def create_reservation(
        self,
        user_id: str,
        node_ids,
        start_at: float,
        end_at: float,
    ) -> Reservation:
        node_ids = sorted(set(node_ids))
        if not node_ids:
            raise FedplaneError("VALIDATION", "node_ids must be non-empty")
        if not (start_at < end_at):
            raise FedplaneError(
                "BAD_INTERVAL", "start_at must be strictly before end_at"
            )
        if end_at - start_at > self.config.max_duration_s:
            raise FedplaneError(
                "TOO_LONG",
                f"duration exceeds the {self.config.max_duration_s:.0f}s maximum",
            )
        now = self.clock()
        with self.store.write() as conn:
            self.store.get_user(user_id)
            for node_id in node_ids:
                node = self.store.get_node(node_id)
                if node.federation_state is not FederationState.FEDERATED:
                    raise FedplaneError(
                        "NODE_NOT_FEDERATED",
                        f"node {node_id} is {node.federation_state.value}, not FEDERATED",
                    )
            conflicts = self._conflicting(conn, node_ids, start_at, end_at)
            if conflicts:
                raise FedplaneError(
                    "CONFLICT",
                    "requested interval overlaps existing reservations",
                    details=sorted(conflicts),
                )
            reservation = Reservation(
                reservation_id=new_id(),
                user_id=user_id,
                node_ids=list(node_ids),
                start_at=start_at,
                end_at=end_at,
                status=ReservationStatus.ACTIVE,
                created_at=now,
            )
            conn.execute(
                "INSERT INTO reservations (reservation_id, user_id, start_at, end_at, "
                "status, created_at) VALUES (?, ?, ?, ?, ?, ?)",
                (
                    reservation.reservation_id,
                    user_id,
                    start_at,
                    end_at,
                    reservation.status.value,
                    now,
                ),
            )
            for node_id in node_ids:
                conn.execute(
                    "INSERT INTO reservation_nodes (reservation_id, node_id) VALUES (?, ?)",
                    (reservation.reservation_id, node_id),
                )
                self.store._add_edge(
                    conn, reservation.reservation_id, node_id, Relation.RESERVATION_ON_NODE
                )
        return reservation

    def _conflicting(self, conn, node_ids, start_at, end_at) -> set:
        placeholders = ",".join("?" for _ in node_ids)
        rows = conn.execute(
            f"SELECT DISTINCT r.reservation_id, r.start_at, r.end_at "
            f"FROM reservations r JOIN reservation_nodes rn "
            f"ON r.reservation_id = rn.reservation_id "
            f"WHERE rn.node_id IN ({placeholders}) AND r.status = ?",
            (*node_ids, ReservationStatus.ACTIVE.value),
        ).fetchall()
        return {
            row["reservation_id"]
            for row in rows
            if intervals_overlap(start_at, end_at, row["start_at"], row["end_at"])
        }

    def cancel_reservation(self, reservation_id: str, user_id: str) -> Reservation:
        now = self.clock()
        with self.store.write() as conn:
            reservation = self.get_reservation(reservation_id)
            user = self.store.get_user(user_id)
            if reservation.user_id != user_id and user.role is not Role.ADMIN:
                raise FedplaneError(
                    "FORBIDDEN", "only the reservation owner or an admin may cancel"
                )
            if reservation.status is not ReservationStatus.ACTIVE:
                raise FedplaneError(
                    "ALREADY_TERMINAL",
                    f"reservation is {reservation.status.value}",
                )
            conn.execute(
                "UPDATE reservations SET status = ? WHERE reservation_id = ?",
                (ReservationStatus.CANCELLED.value, reservation_id),
            )
            reservation.status = ReservationStatus.CANCELLED
            if self.on_cancelled is not None:
                self.on_cancelled(reservation_id, now)
        return reservation

    def get_reservation(self, reservation_id: str) -> Reservation:
        conn = self.store.read()
        row = conn.execute(
            "SELECT * FROM reservations WHERE reservation_id = ?", (reservation_id,)
        ).fetchone()
        if row is None:
            raise FedplaneError("NOT_FOUND", f"reservation {reservation_id} not found")
        return self._hydrate(conn, row)

    def _hydrate(self, conn, row) -> Reservation:
        node_ids = [
            r["node_id"]
            for r in conn.execute(
                "SELECT node_id FROM reservation_nodes WHERE reservation_id = ? "
                "ORDER BY node_id",
                (row["reservation_id"],),
            ).fetchall()
        ]
        return Reservation(
            reservation_id=row["reservation_id"],
            user_id=row["user_id"],
            node_ids=node_ids,
            start_at=row["start_at"],
            end_at=row["end_at"],
            status=ReservationStatus(row["status"]),
            created_at=row["created_at"],
        )

    def get_schedule(
        self,
        node_id: str,
        window_start: Optional[float] = None,
        window_end: Optional[float] = None,
    ) -> list:
        """Non-cancelled reservations intersecting the window, by start time."""
        self.store.get_node(node_id)
        conn = self.store.read()
        rows = conn.execute(
            "SELECT r.* FROM reservations r JOIN reservation_nodes rn "
            "ON r.reservation_id = rn.reservation_id "
            "WHERE rn.node_id = ? AND r.status != ? "
            "ORDER BY r.start_at, r.reservation_id",
            (node_id, ReservationStatus.CANCELLED.value),
        ).fetchall()
        out = []
        for row in rows:
            if window_start is not None and row["end_at"] <= window_start:
                continue
            if window_end is not None and row["start_at"] >= window_end:
                continue
            out.append(self._hydrate(conn, row))
        return out

    def access_check(self, user_id: str, node_id: str, at: float) -> AccessDecision:
        """Allowed iff the user holds an ACTIVE reservation covering `at`, or
        the node is free at `at` and instant access is on (which books the
        default window on the spot, clipped to the next reservation)."""
        with self.store.write() as conn:
            rows = conn.execute(
                "SELECT r.* FROM reservations r JOIN reservation_nodes rn "
                "ON r.reservation_id = rn.reservation_id "
                "WHERE rn.node_id = ? AND r.status = ?",
                (node_id, ReservationStatus.ACTIVE.value),
            ).fetchall()
            covering = [r for r in rows if r["start_at"] <= at < r["end_at"]]
            for row in covering:
                if row["user_id"] == user_id:
                    return AccessDecision(True, row["reservation_id"])
            if covering:
                return AccessDecision(False)
            if not self.config.instant_access:
                return AccessDecision(False)
            end = at + self.config.instant_window_s
            upcoming = [r["start_at"] for r in rows if r["start_at"] > at]
            if upcoming:
                end = min(end, min(upcoming))
            if end <= at:
                return AccessDecision(False)
            reservation = self.create_reservation(user_id, [node_id], at, end)
            return AccessDecision(True, reservation.reservation_id)

    def sweep(self, now: Optional[float] = None) -> dict:
        """Mark reservations whose end (plus grace) has passed as COMPLETED."""
        now = self.clock() if now is None else now
        completed = 0
        with self.store.write() as conn:
            rows = conn.execute(
                "SELECT reservation_id FROM reservations WHERE status = ? AND end_at <= ?",
                (ReservationStatus.ACTIVE.value, now),
            ).fetchall()
            for row in rows:
                conn.execute(
                    "UPDATE reservations SET status = ? WHERE reservation_id = ?",
                    (ReservationStatus.COMPLETED.value, row["reservation_id"]),
                )
                completed += 1
        return {"reservations_completed": completed}
