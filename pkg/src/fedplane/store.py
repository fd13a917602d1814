"""Context store: the single source of truth for federated resources.

Holds labs, testbeds, nodes, users, and the mutual association edges among
them (plus the tables the other control-plane modules persist into), backed
by one SQLite file. All mutations run as serializable transactions
(BEGIN IMMEDIATE on a WAL database); readers see committed snapshots and
never block writers. A global revision counter bumps once per committed
write transaction for cheap change detection.

Deletes are soft: rows get a tombstone timestamp and their association
edges are removed, so history referenced by schedules and sessions stays
auditable.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import sqlite3
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterator, Optional

from .clock import Clock, system_clock
from .errors import FedplaneError
from .ids import dedupe_namespace, namespace_path, new_id

PBKDF2_ITERATIONS = 60_000


class ControlMode(str, Enum):
    CENTRALIZED = "CENTRALIZED"
    DISTRIBUTED = "DISTRIBUTED"


class FederationState(str, Enum):
    REGISTERED = "REGISTERED"
    ACTIVATION_ISSUED = "ACTIVATION_ISSUED"
    FEDERATED = "FEDERATED"
    OFFLINE = "OFFLINE"


# Legal federation_state transitions. The ACTIVATION_ISSUED self-loop covers
# re-issuing an activation before the first one is consumed.
ALLOWED_TRANSITIONS = {
    FederationState.REGISTERED: {FederationState.ACTIVATION_ISSUED},
    FederationState.ACTIVATION_ISSUED: {
        FederationState.ACTIVATION_ISSUED,
        FederationState.FEDERATED,
    },
    FederationState.FEDERATED: {FederationState.OFFLINE},
    FederationState.OFFLINE: {FederationState.FEDERATED},
}


class Relation(str, Enum):
    NODE_IN_TESTBED = "NODE_IN_TESTBED"
    TESTBED_IN_LAB = "TESTBED_IN_LAB"
    ARTIFACT_FOR_NODE = "ARTIFACT_FOR_NODE"
    SESSION_ON_NODE = "SESSION_ON_NODE"
    RESERVATION_ON_NODE = "RESERVATION_ON_NODE"


class Role(str, Enum):
    EXPERIMENTER = "EXPERIMENTER"
    OWNER = "OWNER"
    ADMIN = "ADMIN"


ROLE_RANK = {Role.EXPERIMENTER: 1, Role.OWNER: 2, Role.ADMIN: 3}


@dataclass
class DeviceDescriptor:
    kind: str
    model: str = ""
    notes: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, "model": self.model, "notes": self.notes}

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceDescriptor":
        return cls(kind=d["kind"], model=d.get("model", ""), notes=d.get("notes", ""))


@dataclass
class LabRecord:
    name: str
    owner_user_id: str
    lab_id: str = ""
    created_at: float = 0.0


@dataclass
class TestbedRecord:
    lab_id: str
    public_name: str
    description: str = ""
    testbed_id: str = ""
    created_at: float = 0.0


@dataclass
class NodeRecord:
    testbed_id: str
    public_identifier: str
    control_mode: ControlMode = ControlMode.CENTRALIZED
    device_descriptors: list = field(default_factory=list)
    federation_state: FederationState = FederationState.REGISTERED
    namespace: Optional[str] = None
    node_id: str = ""
    created_at: float = 0.0


@dataclass
class UserRecord:
    username: str
    credential_hash: str
    role: Role = Role.EXPERIMENTER
    user_id: str = ""
    created_at: float = 0.0


@dataclass(frozen=True)
class AssociationEdge:
    from_id: str
    to_id: str
    relation: Relation


@dataclass
class ContextView:
    """An entity with its edges and one-hop neighbors."""

    entity: Any
    edges: list
    neighbors: list


def hash_credential(secret: str, *, iterations: int = PBKDF2_ITERATIONS) -> str:
    """Salted PBKDF2 hash in a self-describing string format."""
    salt = new_id().encode()
    digest = hashlib.pbkdf2_hmac("sha256", secret.encode(), salt, iterations)
    return f"pbkdf2-sha256${iterations}${salt.decode()}${digest.hex()}"


def verify_credential(secret: str, stored: str) -> bool:
    """Constant-time check of a plaintext secret against a stored hash."""
    try:
        scheme, iters, salt, hexdigest = stored.split("$")
        if scheme != "pbkdf2-sha256":
            return False
        digest = hashlib.pbkdf2_hmac(
            "sha256", secret.encode(), salt.encode(), int(iters)
        )
        return hmac.compare_digest(digest.hex(), hexdigest)
    except (ValueError, AttributeError):
        return False


_SCHEMA = """
CREATE TABLE IF NOT EXISTS meta (
    key TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS labs (
    lab_id TEXT PRIMARY KEY,
    name TEXT NOT NULL,
    owner_user_id TEXT NOT NULL,
    created_at REAL NOT NULL,
    deleted_at REAL
);
CREATE TABLE IF NOT EXISTS testbeds (
    testbed_id TEXT PRIMARY KEY,
    lab_id TEXT NOT NULL,
    public_name TEXT NOT NULL,
    description TEXT NOT NULL DEFAULT '',
    created_at REAL NOT NULL,
    deleted_at REAL
);
CREATE TABLE IF NOT EXISTS nodes (
    node_id TEXT PRIMARY KEY,
    testbed_id TEXT NOT NULL,
    public_identifier TEXT NOT NULL,
    control_mode TEXT NOT NULL,
    federation_state TEXT NOT NULL,
    namespace TEXT UNIQUE,
    devices TEXT NOT NULL DEFAULT '[]',
    created_at REAL NOT NULL,
    deleted_at REAL
);
CREATE TABLE IF NOT EXISTS users (
    user_id TEXT PRIMARY KEY,
    username TEXT NOT NULL UNIQUE,
    credential_hash TEXT NOT NULL,
    role TEXT NOT NULL,
    created_at REAL NOT NULL,
    deleted_at REAL
);
CREATE TABLE IF NOT EXISTS edges (
    from_id TEXT NOT NULL,
    to_id TEXT NOT NULL,
    relation TEXT NOT NULL,
    PRIMARY KEY (from_id, to_id, relation)
);
CREATE INDEX IF NOT EXISTS idx_edges_to ON edges (to_id, relation);
CREATE TABLE IF NOT EXISTS activations (
    activation_id TEXT PRIMARY KEY,
    node_id TEXT NOT NULL,
    activation_code TEXT NOT NULL,
    issued_at REAL NOT NULL,
    expires_at REAL NOT NULL,
    consumed INTEGER NOT NULL DEFAULT 0,
    consumed_at REAL,
    revoked INTEGER NOT NULL DEFAULT 0
);
CREATE INDEX IF NOT EXISTS idx_activations_node ON activations (node_id);
CREATE TABLE IF NOT EXISTS agents (
    node_id TEXT PRIMARY KEY,
    token_hash TEXT NOT NULL UNIQUE,
    agent_version TEXT NOT NULL DEFAULT '',
    enrolled_at REAL NOT NULL,
    last_heartbeat_at REAL NOT NULL,
    metrics TEXT NOT NULL DEFAULT '{}'
);
CREATE TABLE IF NOT EXISTS commands (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    command_id TEXT NOT NULL UNIQUE,
    node_id TEXT NOT NULL,
    kind TEXT NOT NULL,
    argv TEXT,
    timeout_s REAL NOT NULL,
    session_payload TEXT,
    status TEXT NOT NULL,
    exit_status INTEGER,
    output TEXT NOT NULL DEFAULT '',
    truncated INTEGER NOT NULL DEFAULT 0,
    offline_warning INTEGER NOT NULL DEFAULT 0,
    created_at REAL NOT NULL,
    delivered_at REAL,
    completed_at REAL
);
CREATE INDEX IF NOT EXISTS idx_commands_node_status ON commands (node_id, status);
CREATE TABLE IF NOT EXISTS reservations (
    reservation_id TEXT PRIMARY KEY,
    user_id TEXT NOT NULL,
    start_at REAL NOT NULL,
    end_at REAL NOT NULL,
    status TEXT NOT NULL,
    created_at REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS reservation_nodes (
    reservation_id TEXT NOT NULL,
    node_id TEXT NOT NULL,
    PRIMARY KEY (reservation_id, node_id)
);
CREATE INDEX IF NOT EXISTS idx_resnodes_node ON reservation_nodes (node_id);
CREATE TABLE IF NOT EXISTS sessions (
    session_id TEXT PRIMARY KEY,
    reservation_id TEXT NOT NULL,
    node_id TEXT NOT NULL,
    user_id TEXT NOT NULL,
    state TEXT NOT NULL,
    access_url TEXT,
    failure TEXT,
    requested_at REAL NOT NULL,
    ready_at REAL,
    ended_at REAL
);
CREATE INDEX IF NOT EXISTS idx_sessions_node ON sessions (node_id, state);
CREATE TABLE IF NOT EXISTS image_bindings (
    binding_id TEXT PRIMARY KEY,
    target_kind TEXT NOT NULL,
    target_id TEXT NOT NULL UNIQUE,
    image_ref TEXT NOT NULL,
    description TEXT NOT NULL DEFAULT ''
);
CREATE TABLE IF NOT EXISTS artifacts (
    artifact_id TEXT PRIMARY KEY,
    kind TEXT NOT NULL,
    namespace TEXT NOT NULL,
    filename TEXT NOT NULL,
    size_bytes INTEGER NOT NULL,
    checksum TEXT NOT NULL,
    descriptors TEXT NOT NULL DEFAULT '{}',
    uploaded_by TEXT NOT NULL,
    uploaded_at REAL NOT NULL,
    deleted_at REAL
);
CREATE INDEX IF NOT EXISTS idx_artifacts_ns ON artifacts (namespace);
CREATE TABLE IF NOT EXISTS auth_sessions (
    token_hash TEXT PRIMARY KEY,
    user_id TEXT NOT NULL,
    issued_at REAL NOT NULL,
    expires_at REAL NOT NULL,
    revoked INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS audit (
    audit_id INTEGER PRIMARY KEY AUTOINCREMENT,
    at REAL NOT NULL,
    actor TEXT NOT NULL,
    action TEXT NOT NULL,
    target TEXT NOT NULL DEFAULT '',
    outcome TEXT NOT NULL,
    detail TEXT NOT NULL DEFAULT ''
);
CREATE TABLE IF NOT EXISTS idempotency (
    idem_key TEXT PRIMARY KEY,
    status_code INTEGER NOT NULL,
    body BLOB NOT NULL,
    media_type TEXT NOT NULL,
    created_at REAL NOT NULL
);
"""


class _TxState(threading.local):
    def __init__(self):
        self.conn: Optional[sqlite3.Connection] = None
        self.depth = 0


class Store:
    """SQLite-backed context store, safe for concurrent use across threads.

    Each thread gets its own connection; write transactions serialize on the
    database write lock (IMMEDIATE), while reads run against the latest
    committed snapshot.
    """

    def __init__(
        self,
        db_path: str,
        clock: Clock = system_clock,
        *,
        busy_timeout_s: float = 30.0,
    ):
        self.db_path = str(db_path)
        self.clock = clock
        self._busy_timeout_ms = int(busy_timeout_s * 1000)
        self._tx = _TxState()
        self._all_conns: list[sqlite3.Connection] = []
        self._conns_lock = threading.Lock()
        with self.write():
            pass  # force schema creation

    # -- connections / transactions ------------------------------------

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path, timeout=self._busy_timeout_ms / 1000)
        conn.row_factory = sqlite3.Row
        conn.isolation_level = None  # explicit transaction control
        conn.execute("PRAGMA journal_mode=WAL")
        conn.execute("PRAGMA synchronous=NORMAL")
        conn.execute(f"PRAGMA busy_timeout={self._busy_timeout_ms}")
        conn.executescript(_SCHEMA)
        conn.execute(
            "INSERT OR IGNORE INTO meta (key, value) VALUES ('revision', '0')"
        )
        with self._conns_lock:
            self._all_conns.append(conn)
        return conn

    def _conn(self) -> sqlite3.Connection:
        if self._tx.conn is None:
            self._tx.conn = self._connect()
        return self._tx.conn

    @contextmanager
    def write(self) -> Iterator[sqlite3.Connection]:
        """Serializable write transaction; reentrant within a thread so
        multi-module flows commit atomically."""
        conn = self._conn()
        if self._tx.depth > 0:
            self._tx.depth += 1
            try:
                yield conn
            finally:
                self._tx.depth -= 1
            return
        conn.execute("BEGIN IMMEDIATE")
        self._tx.depth = 1
        changes_before = conn.total_changes
        try:
            yield conn
            if conn.total_changes != changes_before:
                conn.execute(
                    "UPDATE meta SET value = CAST(value AS INTEGER) + 1 WHERE key = 'revision'"
                )
            conn.execute("COMMIT")
        except BaseException:
            conn.execute("ROLLBACK")
            raise
        finally:
            self._tx.depth = 0

    def read(self) -> sqlite3.Connection:
        return self._conn()

    def close(self) -> None:
        with self._conns_lock:
            for conn in self._all_conns:
                try:
                    conn.close()
                except sqlite3.Error:
                    pass
            self._all_conns.clear()
        self._tx.conn = None
        self._tx.depth = 0

    def revision(self) -> int:
        row = self.read().execute(
            "SELECT value FROM meta WHERE key = 'revision'"
        ).fetchone()
        return int(row["value"]) if row else 0

    # -- entity CRUD ----------------------------------------------------

    def put_entity(self, record):
        """Insert a record, assign its server ID, and create implied edges."""
        if isinstance(record, LabRecord):
            return self._put_lab(record)
        if isinstance(record, TestbedRecord):
            return self._put_testbed(record)
        if isinstance(record, NodeRecord):
            return self._put_node(record)
        if isinstance(record, UserRecord):
            return self._put_user(record)
        raise TypeError(f"unsupported record type: {type(record).__name__}")

    def _put_lab(self, record: LabRecord) -> LabRecord:
        if not record.name.strip():
            raise FedplaneError("VALIDATION", "lab name must be non-empty", ["name"])
        with self.write() as conn:
            owner = conn.execute(
                "SELECT user_id FROM users WHERE user_id = ? AND deleted_at IS NULL",
                (record.owner_user_id,),
            ).fetchone()
            if owner is None:
                raise FedplaneError(
                    "DANGLING_REF", f"owner {record.owner_user_id} does not exist"
                )
            record.lab_id = record.lab_id or new_id()
            record.created_at = record.created_at or self.clock()
            conn.execute(
                "INSERT INTO labs (lab_id, name, owner_user_id, created_at) VALUES (?, ?, ?, ?)",
                (record.lab_id, record.name, record.owner_user_id, record.created_at),
            )
        return record

    def _put_testbed(self, record: TestbedRecord) -> TestbedRecord:
        if not record.public_name.strip():
            raise FedplaneError(
                "VALIDATION", "testbed public_name must be non-empty", ["public_name"]
            )
        with self.write() as conn:
            lab = conn.execute(
                "SELECT lab_id FROM labs WHERE lab_id = ? AND deleted_at IS NULL",
                (record.lab_id,),
            ).fetchone()
            if lab is None:
                raise FedplaneError(
                    "DANGLING_REF", f"lab {record.lab_id} does not exist"
                )
            dup = conn.execute(
                "SELECT testbed_id FROM testbeds WHERE lab_id = ? AND public_name = ? "
                "AND deleted_at IS NULL",
                (record.lab_id, record.public_name),
            ).fetchone()
            if dup is not None:
                raise FedplaneError(
                    "DUPLICATE",
                    f"testbed {record.public_name!r} already exists in lab {record.lab_id}",
                )
            record.testbed_id = record.testbed_id or new_id()
            record.created_at = record.created_at or self.clock()
            conn.execute(
                "INSERT INTO testbeds (testbed_id, lab_id, public_name, description, created_at) "
                "VALUES (?, ?, ?, ?, ?)",
                (
                    record.testbed_id,
                    record.lab_id,
                    record.public_name,
                    record.description,
                    record.created_at,
                ),
            )
            self._add_edge(
                conn, record.testbed_id, record.lab_id, Relation.TESTBED_IN_LAB
            )
        return record

    def _put_node(self, record: NodeRecord) -> NodeRecord:
        if not record.public_identifier.strip():
            raise FedplaneError(
                "VALIDATION",
                "node public_identifier must be non-empty",
                ["public_identifier"],
            )
        for dev in record.device_descriptors:
            if not dev.kind.strip():
                raise FedplaneError(
                    "VALIDATION", "device descriptor kind must be non-empty", ["kind"]
                )
        with self.write() as conn:
            tb = conn.execute(
                "SELECT testbed_id FROM testbeds WHERE testbed_id = ? AND deleted_at IS NULL",
                (record.testbed_id,),
            ).fetchone()
            if tb is None:
                raise FedplaneError(
                    "DANGLING_REF", f"testbed {record.testbed_id} does not exist"
                )
            record.node_id = record.node_id or new_id()
            record.created_at = record.created_at or self.clock()
            record.federation_state = FederationState.REGISTERED
            conn.execute(
                "INSERT INTO nodes (node_id, testbed_id, public_identifier, control_mode, "
                "federation_state, namespace, devices, created_at) VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    record.node_id,
                    record.testbed_id,
                    record.public_identifier,
                    ControlMode(record.control_mode).value,
                    record.federation_state.value,
                    None,
                    json.dumps([d.to_dict() for d in record.device_descriptors]),
                    record.created_at,
                ),
            )
            self._add_edge(
                conn, record.node_id, record.testbed_id, Relation.NODE_IN_TESTBED
            )
        return record

    def _put_user(self, record: UserRecord) -> UserRecord:
        if not record.credential_hash:
            raise FedplaneError("VALIDATION", "credential_hash must not be empty")
        with self.write() as conn:
            dup = conn.execute(
                "SELECT user_id FROM users WHERE username = ?", (record.username,)
            ).fetchone()
            if dup is not None:
                raise FedplaneError(
                    "DUPLICATE", f"username {record.username!r} already exists"
                )
            record.user_id = record.user_id or new_id()
            record.created_at = record.created_at or self.clock()
            conn.execute(
                "INSERT INTO users (user_id, username, credential_hash, role, created_at) "
                "VALUES (?, ?, ?, ?, ?)",
                (
                    record.user_id,
                    record.username,
                    record.credential_hash,
                    Role(record.role).value,
                    record.created_at,
                ),
            )
        return record

    def create_user(self, username: str, password: str, role: Role) -> UserRecord:
        return self.put_entity(
            UserRecord(
                username=username, credential_hash=hash_credential(password), role=role
            )
        )

    def _add_edge(self, conn, from_id: str, to_id: str, relation: Relation) -> None:
        conn.execute(
            "INSERT OR IGNORE INTO edges (from_id, to_id, relation) VALUES (?, ?, ?)",
            (from_id, to_id, relation.value),
        )

    def add_edge(self, from_id: str, to_id: str, relation: Relation) -> None:
        """Public edge insert with endpoint checks (modules use this for
        reservation/session/artifact associations)."""
        with self.write() as conn:
            for entity_id in (from_id, to_id):
                if self._load_any(conn, entity_id) is None:
                    raise FedplaneError(
                        "DANGLING_REF", f"edge endpoint {entity_id} does not exist"
                    )
            self._add_edge(conn, from_id, to_id, relation)

    # -- loading --------------------------------------------------------

    def _row_to_lab(self, row) -> LabRecord:
        return LabRecord(
            name=row["name"],
            owner_user_id=row["owner_user_id"],
            lab_id=row["lab_id"],
            created_at=row["created_at"],
        )

    def _row_to_testbed(self, row) -> TestbedRecord:
        return TestbedRecord(
            lab_id=row["lab_id"],
            public_name=row["public_name"],
            description=row["description"],
            testbed_id=row["testbed_id"],
            created_at=row["created_at"],
        )

    def _row_to_node(self, row) -> NodeRecord:
        return NodeRecord(
            testbed_id=row["testbed_id"],
            public_identifier=row["public_identifier"],
            control_mode=ControlMode(row["control_mode"]),
            device_descriptors=[
                DeviceDescriptor.from_dict(d) for d in json.loads(row["devices"])
            ],
            federation_state=FederationState(row["federation_state"]),
            namespace=row["namespace"],
            node_id=row["node_id"],
            created_at=row["created_at"],
        )

    def _row_to_user(self, row) -> UserRecord:
        return UserRecord(
            username=row["username"],
            credential_hash=row["credential_hash"],
            role=Role(row["role"]),
            user_id=row["user_id"],
            created_at=row["created_at"],
        )

    _TABLES = (
        ("labs", "lab_id", "_row_to_lab"),
        ("testbeds", "testbed_id", "_row_to_testbed"),
        ("nodes", "node_id", "_row_to_node"),
        ("users", "user_id", "_row_to_user"),
    )

    def _load_any(self, conn, entity_id: str):
        for table, pk, converter in self._TABLES:
            row = conn.execute(
                f"SELECT * FROM {table} WHERE {pk} = ?", (entity_id,)
            ).fetchone()
            if row is not None:
                return getattr(self, converter)(row)
        return None

    def get_entity(self, entity_id: str):
        entity = self._load_any(self.read(), entity_id)
        if entity is None:
            raise FedplaneError("NOT_FOUND", f"entity {entity_id} not found")
        return entity

    def get_lab(self, lab_id: str) -> LabRecord:
        row = self.read().execute(
            "SELECT * FROM labs WHERE lab_id = ?", (lab_id,)
        ).fetchone()
        if row is None:
            raise FedplaneError("NOT_FOUND", f"lab {lab_id} not found")
        return self._row_to_lab(row)

    def get_testbed(self, testbed_id: str) -> TestbedRecord:
        row = self.read().execute(
            "SELECT * FROM testbeds WHERE testbed_id = ?", (testbed_id,)
        ).fetchone()
        if row is None:
            raise FedplaneError("NOT_FOUND", f"testbed {testbed_id} not found")
        return self._row_to_testbed(row)

    def get_node(self, node_id: str) -> NodeRecord:
        row = self.read().execute(
            "SELECT * FROM nodes WHERE node_id = ?", (node_id,)
        ).fetchone()
        if row is None:
            raise FedplaneError("NOT_FOUND", f"node {node_id} not found")
        return self._row_to_node(row)

    def get_user(self, user_id: str) -> UserRecord:
        row = self.read().execute(
            "SELECT * FROM users WHERE user_id = ?", (user_id,)
        ).fetchone()
        if row is None:
            raise FedplaneError("NOT_FOUND", f"user {user_id} not found")
        return self._row_to_user(row)

    def find_user(self, username: str) -> Optional[UserRecord]:
        row = self.read().execute(
            "SELECT * FROM users WHERE username = ? AND deleted_at IS NULL",
            (username,),
        ).fetchone()
        return self._row_to_user(row) if row else None

    def get_context(self, entity_id: str) -> ContextView:
        """Entity plus edges plus one-hop neighbors (read-only)."""
        conn = self.read()
        entity = self._load_any(conn, entity_id)
        if entity is None:
            raise FedplaneError("NOT_FOUND", f"entity {entity_id} not found")
        rows = conn.execute(
            "SELECT from_id, to_id, relation FROM edges WHERE from_id = ? OR to_id = ? "
            "ORDER BY relation, from_id, to_id",
            (entity_id, entity_id),
        ).fetchall()
        edges = [
            AssociationEdge(r["from_id"], r["to_id"], Relation(r["relation"]))
            for r in rows
        ]
        neighbors = []
        seen = set()
        for edge in edges:
            other = edge.to_id if edge.from_id == entity_id else edge.from_id
            if other in seen:
                continue
            seen.add(other)
            found = self._load_any(conn, other)
            if found is not None:
                neighbors.append(found)
        return ContextView(entity=entity, edges=edges, neighbors=neighbors)

    # -- node state machine ----------------------------------------------

    def set_node_state(self, node_id: str, new_state: FederationState) -> NodeRecord:
        """Drive the node federation state machine; assigns the canonical
        namespace the first time a node becomes FEDERATED."""
        new_state = FederationState(new_state)
        with self.write() as conn:
            row = conn.execute(
                "SELECT * FROM nodes WHERE node_id = ?", (node_id,)
            ).fetchone()
            if row is None:
                raise FedplaneError("NOT_FOUND", f"node {node_id} not found")
            current = FederationState(row["federation_state"])
            if new_state not in ALLOWED_TRANSITIONS[current]:
                raise FedplaneError(
                    "ILLEGAL_TRANSITION",
                    f"node {node_id}: {current.value} -> {new_state.value} is not allowed",
                )
            namespace = row["namespace"]
            if new_state is FederationState.FEDERATED and namespace is None:
                namespace = self._assign_namespace(conn, row)
            conn.execute(
                "UPDATE nodes SET federation_state = ?, namespace = ? WHERE node_id = ?",
                (new_state.value, namespace, node_id),
            )
            updated = conn.execute(
                "SELECT * FROM nodes WHERE node_id = ?", (node_id,)
            ).fetchone()
            return self._row_to_node(updated)

    def _assign_namespace(self, conn, node_row) -> str:
        tb = conn.execute(
            "SELECT * FROM testbeds WHERE testbed_id = ?", (node_row["testbed_id"],)
        ).fetchone()
        lab = conn.execute(
            "SELECT * FROM labs WHERE lab_id = ?", (tb["lab_id"],)
        ).fetchone()
        base = namespace_path(
            lab["name"], tb["public_name"], node_row["public_identifier"]
        )
        taken = {
            r["namespace"]
            for r in conn.execute(
                "SELECT namespace FROM nodes WHERE namespace IS NOT NULL"
            ).fetchall()
        }
        return dedupe_namespace(base, taken)

    def testbed_namespace(self, testbed_id: str) -> str:
        tb = self.get_testbed(testbed_id)
        lab = self.get_lab(tb.lab_id)
        return namespace_path(lab.name, tb.public_name)

    def resolve_namespace(self, namespace: str):
        """Match a lab/testbed[/node] path to its entity.

        Returns ("node", NodeRecord) or ("testbed", TestbedRecord); None when
        nothing matches.
        """
        conn = self.read()
        row = conn.execute(
            "SELECT * FROM nodes WHERE namespace = ? AND deleted_at IS NULL",
            (namespace,),
        ).fetchone()
        if row is not None:
            return ("node", self._row_to_node(row))
        for tb_row in conn.execute(
            "SELECT * FROM testbeds WHERE deleted_at IS NULL"
        ).fetchall():
            lab = conn.execute(
                "SELECT * FROM labs WHERE lab_id = ?", (tb_row["lab_id"],)
            ).fetchone()
            if namespace == namespace_path(lab["name"], tb_row["public_name"]):
                return ("testbed", self._row_to_testbed(tb_row))
        return None

    # -- query ------------------------------------------------------------

    def query(
        self,
        entity_kind: Optional[str] = None,
        state: Optional[FederationState] = None,
        testbed: Optional[str] = None,
        lab: Optional[str] = None,
        device_kind: Optional[str] = None,
        device_model: Optional[str] = None,
        include_deleted: bool = False,
    ) -> list:
        """Filtered listing in deterministic (ID) order.

        `testbed`/`lab` match either the ref ID or the display name. Node
        predicates (state, devices) force entity_kind="node".
        """
        conn = self.read()
        if state or testbed or device_kind or device_model:
            entity_kind = entity_kind or "node"
        if entity_kind in (None, "node"):
            return self._query_nodes(
                conn, state, testbed, lab, device_kind, device_model, include_deleted
            )
        tombstone = "" if include_deleted else " AND deleted_at IS NULL"
        if entity_kind == "lab":
            rows = conn.execute(
                f"SELECT * FROM labs WHERE 1=1{tombstone} ORDER BY lab_id"
            ).fetchall()
            return [self._row_to_lab(r) for r in rows]
        if entity_kind == "testbed":
            sql = f"SELECT * FROM testbeds WHERE 1=1{tombstone}"
            args: list = []
            if lab:
                sql += " AND lab_id = ?"
                args.append(lab)
            rows = conn.execute(sql + " ORDER BY testbed_id", args).fetchall()
            return [self._row_to_testbed(r) for r in rows]
        if entity_kind == "user":
            rows = conn.execute(
                f"SELECT * FROM users WHERE 1=1{tombstone} ORDER BY user_id"
            ).fetchall()
            return [self._row_to_user(r) for r in rows]
        raise FedplaneError("VALIDATION", f"unknown entity kind {entity_kind!r}")

    def _query_nodes(
        self, conn, state, testbed, lab, device_kind, device_model, include_deleted
    ) -> list:
        sql = (
            "SELECT n.* FROM nodes n JOIN testbeds t ON n.testbed_id = t.testbed_id "
            "JOIN labs l ON t.lab_id = l.lab_id WHERE 1=1"
        )
        args: list = []
        if not include_deleted:
            sql += " AND n.deleted_at IS NULL"
        if state:
            sql += " AND n.federation_state = ?"
            args.append(FederationState(state).value)
        if testbed:
            sql += " AND (n.testbed_id = ? OR t.public_name = ?)"
            args.extend([testbed, testbed])
        if lab:
            sql += " AND (t.lab_id = ? OR l.name = ?)"
            args.extend([lab, lab])
        rows = conn.execute(sql + " ORDER BY n.node_id", args).fetchall()
        nodes = [self._row_to_node(r) for r in rows]
        if device_kind:
            nodes = [
                n
                for n in nodes
                if any(d.kind.lower() == device_kind.lower() for d in n.device_descriptors)
            ]
        if device_model:
            nodes = [
                n
                for n in nodes
                if any(d.model == device_model for d in n.device_descriptors)
            ]
        return nodes

    # -- soft delete --------------------------------------------------------

    def delete_entity(self, entity_id: str) -> None:
        """Tombstone an entity and drop its association edges. Dependent
        artifact entries are tombstoned too, never destroyed."""
        with self.write() as conn:
            found = False
            for table, pk, _ in self._TABLES:
                cur = conn.execute(
                    f"UPDATE {table} SET deleted_at = ? WHERE {pk} = ? AND deleted_at IS NULL",
                    (self.clock(), entity_id),
                )
                if cur.rowcount:
                    found = True
                    break
            if not found:
                raise FedplaneError("NOT_FOUND", f"entity {entity_id} not found")
            artifact_ids = [
                r["from_id"]
                for r in conn.execute(
                    "SELECT from_id FROM edges WHERE to_id = ? AND relation = ?",
                    (entity_id, Relation.ARTIFACT_FOR_NODE.value),
                ).fetchall()
            ]
            for artifact_id in artifact_ids:
                conn.execute(
                    "UPDATE artifacts SET deleted_at = ? WHERE artifact_id = ? AND deleted_at IS NULL",
                    (self.clock(), artifact_id),
                )
            conn.execute(
                "DELETE FROM edges WHERE from_id = ? OR to_id = ?",
                (entity_id, entity_id),
            )

    # -- audit ----------------------------------------------------------------

    def append_audit(
        self, actor: str, action: str, target: str, outcome: str, detail: str = ""
    ) -> None:
        with self.write() as conn:
            conn.execute(
                "INSERT INTO audit (at, actor, action, target, outcome, detail) "
                "VALUES (?, ?, ?, ?, ?, ?)",
                (self.clock(), actor, action, target, outcome, detail),
            )

    def audit_entries(self, action: Optional[str] = None) -> list[dict]:
        sql = "SELECT * FROM audit"
        args: list = []
        if action:
            sql += " WHERE action = ?"
            args.append(action)
        rows = self.read().execute(sql + " ORDER BY audit_id", args).fetchall()
        return [dict(r) for r in rows]
