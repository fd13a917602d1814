"""API gateway: one HTTP surface (versioned under /v1) for the portal, the
CLI, and enrolled agents.

Every route carries an explicit access policy (PUBLIC / AGENT / minimum
user role); the policy table is enforced by a single app-wide dependency,
so an unannotated route cannot ship. Failures leave in a stable envelope
{code, message, details[]}, and an outermost middleware writes exactly one
audit record per /v1 response.
"""
from __future__ import annotations

import hashlib
import json
import logging
import secrets
from typing import Optional

from fastapi import Depends, FastAPI, File, Form, Request, Response, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel, Field

from .clock import iso_utc, parse_utc
from .errors import FedplaneError, http_status_for
from .plane import ControlPlane
from .repos import ArtifactKind
from .scheduler import Reservation
from .sessions import Session
from .store import (
    ControlMode,
    DeviceDescriptor,
    LabRecord,
    NodeRecord,
    ROLE_RANK,
    Role,
    TestbedRecord,
    UserRecord,
    hash_credential,
    verify_credential,
)

logger = logging.getLogger(__name__)

API = "/v1"

# Access policy for every route: PUBLIC (no token), AGENT (agent bearer
# token, validated by the engine), or the minimum user role.
POLICY: dict[tuple[str, str], str] = {
    ("POST", f"{API}/login"): "PUBLIC",
    ("GET", f"{API}/status"): "PUBLIC",
    ("POST", f"{API}/users"): "ADMIN",
    ("GET", f"{API}/labs"): "EXPERIMENTER",
    ("POST", f"{API}/labs"): "OWNER",
    ("GET", f"{API}/testbeds"): "EXPERIMENTER",
    ("POST", f"{API}/testbeds"): "OWNER",
    ("GET", f"{API}/testbeds/{{testbed_id}}/nodes"): "EXPERIMENTER",
    ("POST", f"{API}/testbeds/{{testbed_id}}/nodes"): "OWNER",
    ("POST", f"{API}/integrate"): "OWNER",
    ("GET", f"{API}/nodes/{{node_id}}"): "EXPERIMENTER",
    ("POST", f"{API}/nodes/{{node_id}}/integrate"): "OWNER",
    ("GET", f"{API}/nodes/{{node_id}}/script"): "OWNER",
    ("GET", f"{API}/nodes/{{node_id}}/schedule"): "EXPERIMENTER",
    ("POST", f"{API}/nodes/{{node_id}}/commands"): "ADMIN",
    ("GET", f"{API}/commands/{{command_id}}"): "ADMIN",
    ("GET", f"{API}/reservations"): "EXPERIMENTER",
    ("POST", f"{API}/reservations"): "EXPERIMENTER",
    ("DELETE", f"{API}/reservations/{{reservation_id}}"): "EXPERIMENTER",
    ("GET", f"{API}/sessions"): "EXPERIMENTER",
    ("POST", f"{API}/sessions"): "EXPERIMENTER",
    ("GET", f"{API}/sessions/latency"): "EXPERIMENTER",
    ("GET", f"{API}/sessions/latency.csv"): "EXPERIMENTER",
    ("GET", f"{API}/sessions/{{session_id}}"): "EXPERIMENTER",
    ("DELETE", f"{API}/sessions/{{session_id}}"): "EXPERIMENTER",
    ("POST", f"{API}/images"): "OWNER",
    ("GET", f"{API}/artifacts"): "EXPERIMENTER",
    ("POST", f"{API}/artifacts"): "EXPERIMENTER",
    ("GET", f"{API}/artifacts/{{artifact_id}}"): "EXPERIMENTER",
    ("GET", f"{API}/fleet"): "EXPERIMENTER",
    ("POST", f"{API}/agent/enroll"): "PUBLIC",
    ("POST", f"{API}/agent/heartbeat"): "AGENT",
    ("POST", f"{API}/agent/result"): "AGENT",
}


# -- request bodies -----------------------------------------------------------


class LoginIn(BaseModel):
    username: str
    credential: str


class UserIn(BaseModel):
    username: str = Field(min_length=1)
    password: str = Field(min_length=1)
    role: str = "EXPERIMENTER"


class LabIn(BaseModel):
    name: str


class TestbedIn(BaseModel):
    lab_id: str
    public_name: str
    description: str = ""


class DeviceIn(BaseModel):
    kind: str
    model: str = ""
    notes: str = ""


class NodeIn(BaseModel):
    public_identifier: str
    control_mode: str = "CENTRALIZED"
    devices: list[DeviceIn] = Field(default_factory=list)


class IntegrateNodeIn(BaseModel):
    public_identifier: str = ""
    control_mode: str = "CENTRALIZED"
    devices: list[DeviceIn] = Field(default_factory=list)


class IntegrateIn(BaseModel):
    lab_name: str = ""
    public_name: str = ""
    description: str = ""
    nodes: list[IntegrateNodeIn] = Field(default_factory=list)


class ReservationIn(BaseModel):
    node_ids: list[str]
    start_at: str | float
    end_at: str | float


class SessionIn(BaseModel):
    node_id: str


class ImageBindingIn(BaseModel):
    target_kind: str
    target_id: str
    image_ref: str
    description: str = ""


class CommandIn(BaseModel):
    argv: list[str]
    timeout_s: float = 60.0


class EnrollIn(BaseModel):
    activation_id: str
    activation_code: str
    agent_version: str = ""
    host_facts: dict = Field(default_factory=dict)


class HeartbeatIn(BaseModel):
    metrics: dict = Field(default_factory=dict)
    agent_version: Optional[str] = None


class ResultIn(BaseModel):
    command_id: str
    exit_status: Optional[int] = None
    output: str = ""
    timed_out: bool = False
    detail: Optional[dict] = None


# -- serialization ------------------------------------------------------------


def _lab_dict(lab: LabRecord) -> dict:
    return {
        "lab_id": lab.lab_id,
        "name": lab.name,
        "owner_user_id": lab.owner_user_id,
        "created_at": iso_utc(lab.created_at),
    }


def _testbed_dict(tb: TestbedRecord) -> dict:
    return {
        "testbed_id": tb.testbed_id,
        "lab_id": tb.lab_id,
        "public_name": tb.public_name,
        "description": tb.description,
        "created_at": iso_utc(tb.created_at),
    }


def _node_dict(node: NodeRecord) -> dict:
    return {
        "node_id": node.node_id,
        "testbed_id": node.testbed_id,
        "public_identifier": node.public_identifier,
        "control_mode": node.control_mode.value,
        "federation_state": node.federation_state.value,
        "namespace": node.namespace,
        "device_descriptors": [d.to_dict() for d in node.device_descriptors],
        "created_at": iso_utc(node.created_at),
    }


def _reservation_dict(r: Reservation) -> dict:
    return {
        "reservation_id": r.reservation_id,
        "user_id": r.user_id,
        "node_ids": r.node_ids,
        "start_at": iso_utc(r.start_at),
        "end_at": iso_utc(r.end_at),
        "status": r.status.value,
        "created_at": iso_utc(r.created_at),
    }


def _session_dict(s: Session) -> dict:
    return {
        "session_id": s.session_id,
        "reservation_id": s.reservation_id,
        "node_id": s.node_id,
        "user_id": s.user_id,
        "state": s.state.value,
        "access_url": s.access_url,
        "failure": s.failure,
        "requested_at": iso_utc(s.requested_at),
        "ready_at": iso_utc(s.ready_at) if s.ready_at else None,
        "ended_at": iso_utc(s.ended_at) if s.ended_at else None,
        "access_latency_s": s.access_latency_s,
    }


def _command_dict(cmd) -> dict:
    return {
        "command_id": cmd.command_id,
        "node_id": cmd.node_id,
        "kind": cmd.kind.value,
        "argv": cmd.argv,
        "timeout_s": cmd.timeout_s,
        "status": cmd.status.value,
        "exit_status": cmd.exit_status,
        "output": cmd.output,
        "truncated": cmd.truncated,
        "offline_warning": cmd.offline_warning,
    }


def _agent_command_dict(cmd) -> dict:
    return {
        "command_id": cmd.command_id,
        "kind": cmd.kind.value,
        "argv": cmd.argv,
        "timeout_s": cmd.timeout_s,
        "session": cmd.session_payload,
    }


def _artifact_dict(entry) -> dict:
    return {
        "artifact_id": entry.artifact_id,
        "kind": entry.kind.value,
        "namespace": entry.namespace,
        "filename": entry.filename,
        "size_bytes": entry.size_bytes,
        "checksum": entry.checksum,
        "descriptors": entry.descriptors,
        "uploaded_by": entry.uploaded_by,
        "uploaded_at": iso_utc(entry.uploaded_at),
    }


def _parse_when(value: str | float, field_name: str) -> float:
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return parse_utc(value)
    except ValueError:
        raise FedplaneError(
            "BAD_INTERVAL", f"{field_name} is not a timestamp", [field_name]
        )


# -- app factory ---------------------------------------------------------------


def create_app(plane: ControlPlane) -> FastAPI:
    app = FastAPI(title="fedplane", docs_url=None, redoc_url=None, openapi_url=None)
    cfg = plane.config.gateway
    store = plane.store

    # -- auth helpers -----------------------------------------------------

    def _token_hash(token: str) -> str:
        return hashlib.sha256(token.encode()).hexdigest()

    def _issue_token(user: UserRecord) -> dict:
        token = secrets.token_urlsafe(32)
        now = plane.clock()
        expires = now + cfg.token_ttl_s
        with store.write() as conn:
            conn.execute(
                "INSERT INTO auth_sessions (token_hash, user_id, issued_at, expires_at) "
                "VALUES (?, ?, ?, ?)",
                (_token_hash(token), user.user_id, now, expires),
            )
        return {
            "token": token,
            "user_id": user.user_id,
            "username": user.username,
            "role": user.role.value,
            "expires_at": iso_utc(expires),
        }

    def _user_for_token(token: str) -> UserRecord:
        row = store.read().execute(
            "SELECT * FROM auth_sessions WHERE token_hash = ?", (_token_hash(token),)
        ).fetchone()
        if row is None or row["revoked"] or row["expires_at"] <= plane.clock():
            raise FedplaneError("UNAUTHORIZED", "missing, expired, or revoked token")
        return store.get_user(row["user_id"])

    def _bearer(request: Request) -> str:
        header = request.headers.get("authorization", "")
        if not header.startswith("Bearer "):
            raise FedplaneError("UNAUTHORIZED", "Authorization: Bearer token required")
        return header.split(" ", 1)[1]

    def enforce_policy(request: Request) -> None:
        route = request.scope.get("route")
        path = getattr(route, "path_format", request.url.path)
        policy = POLICY.get((request.method, path))
        if policy is None:
            raise FedplaneError(
                "FORBIDDEN", f"route {request.method} {path} has no access policy"
            )
        request.state.actor = "anonymous"
        if policy == "PUBLIC":
            return
        if policy == "AGENT":
            # Presence check only; the engine validates the token against
            # the fleet table on every call.
            request.state.agent_token = _bearer(request)
            request.state.actor = "agent"
            return
        user = _user_for_token(_bearer(request))
        if ROLE_RANK[user.role] < ROLE_RANK[Role(policy)]:
            raise FedplaneError(
                "FORBIDDEN", f"requires role {policy} or higher"
            )
        request.state.user = user
        request.state.actor = user.username

    def _user(request: Request) -> UserRecord:
        return request.state.user

    def _require_lab_owner(user: UserRecord, lab_id: str) -> None:
        lab = store.get_lab(lab_id)
        if lab.owner_user_id != user.user_id and user.role is not Role.ADMIN:
            raise FedplaneError("FORBIDDEN", "not the owner of this lab")

    def _lab_for_node(node_id: str) -> str:
        node = store.get_node(node_id)
        return store.get_testbed(node.testbed_id).lab_id

    # -- middleware: audit (outer) and idempotency replay (inner) -----------

    @app.middleware("http")
    async def idempotency_replay(request: Request, call_next):
        key = request.headers.get("idempotency-key")
        if not key or request.method not in ("POST", "DELETE"):
            return await call_next(request)
        cache_key = hashlib.sha256(
            "\x00".join(
                [
                    request.method,
                    request.url.path,
                    request.headers.get("authorization", ""),
                    key,
                ]
            ).encode()
        ).hexdigest()
        row = store.read().execute(
            "SELECT * FROM idempotency WHERE idem_key = ?", (cache_key,)
        ).fetchone()
        if row is not None:
            return Response(
                content=row["body"],
                status_code=row["status_code"],
                media_type=row["media_type"],
                headers={"Idempotency-Replayed": "true"},
            )
        response = await call_next(request)
        body = b"".join([chunk async for chunk in response.body_iterator])
        with store.write() as conn:
            conn.execute(
                "INSERT OR IGNORE INTO idempotency (idem_key, status_code, body, media_type, created_at) "
                "VALUES (?, ?, ?, ?, ?)",
                (
                    cache_key,
                    response.status_code,
                    body,
                    response.media_type or "application/json",
                    plane.clock(),
                ),
            )
        return Response(
            content=body,
            status_code=response.status_code,
            media_type=response.media_type,
            headers=dict(response.headers),
        )

    @app.middleware("http")
    async def audit_requests(request: Request, call_next):
        if not request.url.path.startswith(API):
            return await call_next(request)
        outcome = "500"
        try:
            response = await call_next(request)
            outcome = str(response.status_code)
            return response
        finally:
            route = request.scope.get("route")
            path = getattr(route, "path_format", request.url.path)
            store.append_audit(
                actor=getattr(request.state, "actor", "anonymous"),
                action=f"{request.method} {path}",
                target=request.url.path,
                outcome=outcome,
                detail=getattr(request.state, "audit_detail", ""),
            )

    # -- error envelope ------------------------------------------------------

    @app.exception_handler(FedplaneError)
    async def fedplane_error_handler(request: Request, exc: FedplaneError):
        if exc.audit_detail:
            request.state.audit_detail = exc.audit_detail
        elif exc.code:
            request.state.audit_detail = exc.code
        return JSONResponse(
            status_code=http_status_for(exc.code), content=exc.to_envelope()
        )

    @app.exception_handler(RequestValidationError)
    async def validation_error_handler(request: Request, exc: RequestValidationError):
        details = sorted(
            ".".join(str(part) for part in err.get("loc", ())) for err in exc.errors()
        )
        request.state.audit_detail = "VALIDATION"
        return JSONResponse(
            status_code=422,
            content={
                "code": "VALIDATION",
                "message": "request body failed validation",
                "details": details,
            },
        )

    guarded = dict(dependencies=[Depends(enforce_policy)])

    # -- auth / plumbing -------------------------------------------------------

    @app.post(f"{API}/login", **guarded)
    def login(body: LoginIn):
        user = store.find_user(body.username)
        if user is None:
            # Burn a verification anyway so unknown-user and wrong-password
            # take the same path and return the same bytes.
            verify_credential(body.credential, _DUMMY_HASH)
            raise FedplaneError("INVALID_CREDENTIALS", "invalid username or credential")
        if not verify_credential(body.credential, user.credential_hash):
            raise FedplaneError("INVALID_CREDENTIALS", "invalid username or credential")
        return _issue_token(user)

    @app.get(f"{API}/status", **guarded)
    def status_endpoint():
        return {"ok": True, "server_time": iso_utc(plane.clock())}

    @app.post(f"{API}/users", **guarded)
    def create_user(body: UserIn, request: Request):
        user = store.put_entity(
            UserRecord(
                username=body.username,
                credential_hash=hash_credential(body.password),
                role=Role(body.role),
            )
        )
        return {"user_id": user.user_id, "username": user.username, "role": user.role.value}

    # -- registry ---------------------------------------------------------------

    @app.get(f"{API}/labs", **guarded)
    def list_labs():
        return [_lab_dict(lab) for lab in store.query(entity_kind="lab")]

    @app.post(f"{API}/labs", **guarded)
    def create_lab(body: LabIn, request: Request):
        lab = store.put_entity(
            LabRecord(name=body.name, owner_user_id=_user(request).user_id)
        )
        return _lab_dict(lab)

    @app.get(f"{API}/testbeds", **guarded)
    def list_testbeds(lab_id: Optional[str] = None):
        return [
            _testbed_dict(tb)
            for tb in store.query(entity_kind="testbed", lab=lab_id)
        ]

    @app.post(f"{API}/testbeds", **guarded)
    def create_testbed(body: TestbedIn, request: Request):
        _require_lab_owner(_user(request), body.lab_id)
        tb = store.put_entity(
            TestbedRecord(
                lab_id=body.lab_id,
                public_name=body.public_name,
                description=body.description,
            )
        )
        return _testbed_dict(tb)

    @app.get(f"{API}/testbeds/{{testbed_id}}/nodes", **guarded)
    def list_nodes(testbed_id: str):
        store.get_testbed(testbed_id)
        return [_node_dict(n) for n in store.query(entity_kind="node", testbed=testbed_id)]

    @app.post(f"{API}/testbeds/{{testbed_id}}/nodes", **guarded)
    def create_node(testbed_id: str, body: NodeIn, request: Request):
        tb = store.get_testbed(testbed_id)
        _require_lab_owner(_user(request), tb.lab_id)
        node = store.put_entity(
            NodeRecord(
                testbed_id=testbed_id,
                public_identifier=body.public_identifier,
                control_mode=ControlMode(body.control_mode),
                device_descriptors=[
                    DeviceDescriptor(kind=d.kind, model=d.model, notes=d.notes)
                    for d in body.devices
                ],
            )
        )
        return _node_dict(node)

    @app.get(f"{API}/nodes/{{node_id}}", **guarded)
    def get_node(node_id: str):
        ctx = store.get_context(node_id)
        sessions = plane.sessions.list_sessions(node_id=node_id)
        return {
            "node": _node_dict(ctx.entity),
            "edges": [
                {"from_id": e.from_id, "to_id": e.to_id, "relation": e.relation.value}
                for e in ctx.edges
            ],
            "sessions": [_session_dict(s) for s in sessions],
        }

    # -- integration --------------------------------------------------------------

    def _integrate_node(node_id: str) -> dict:
        activation = plane.engine.issue_activation(node_id)
        script = plane.engine.generate_script(node_id)
        return {
            "node_id": node_id,
            "activation_id": activation.activation_id,
            "expires_at": iso_utc(activation.expires_at),
            "script": script.script_text,
            "checksum": script.checksum,
        }

    @app.post(f"{API}/nodes/{{node_id}}/integrate", **guarded)
    def integrate_node(node_id: str, request: Request):
        _require_lab_owner(_user(request), _lab_for_node(node_id))
        return _integrate_node(node_id)

    @app.get(f"{API}/nodes/{{node_id}}/script", **guarded)
    def get_script(node_id: str, request: Request):
        _require_lab_owner(_user(request), _lab_for_node(node_id))
        script = plane.engine.generate_script(node_id)
        return PlainTextResponse(script.script_text, media_type="text/x-shellscript")

    @app.post(f"{API}/integrate", **guarded)
    def integrate_testbed(body: IntegrateIn, request: Request):
        """Whole-testbed integration: register lab, testbed, and every
        control interface, and return one deployment script per node — all
        in a single transaction."""
        missing = []
        if not body.lab_name.strip():
            missing.append("lab_name")
        if not body.public_name.strip():
            missing.append("public_name")
        if not body.description.strip():
            missing.append("description")
        if not body.nodes:
            missing.append("nodes")
        for i, node in enumerate(body.nodes):
            if not node.public_identifier.strip():
                missing.append(f"nodes[{i}].public_identifier")
            if not node.devices:
                missing.append(f"nodes[{i}].devices")
            for j, dev in enumerate(node.devices):
                if not dev.kind.strip():
                    missing.append(f"nodes[{i}].devices[{j}].kind")
        if missing:
            raise FedplaneError(
                "VALIDATION", "integration request is incomplete", missing
            )
        user = _user(request)
        with store.write():
            lab = next(
                (
                    l
                    for l in store.query(entity_kind="lab")
                    if l.name == body.lab_name and l.owner_user_id == user.user_id
                ),
                None,
            )
            if lab is None:
                lab = store.put_entity(
                    LabRecord(name=body.lab_name, owner_user_id=user.user_id)
                )
            tb = store.put_entity(
                TestbedRecord(
                    lab_id=lab.lab_id,
                    public_name=body.public_name,
                    description=body.description,
                )
            )
            results = []
            for node_in in body.nodes:
                node = store.put_entity(
                    NodeRecord(
                        testbed_id=tb.testbed_id,
                        public_identifier=node_in.public_identifier,
                        control_mode=ControlMode(node_in.control_mode),
                        device_descriptors=[
                            DeviceDescriptor(kind=d.kind, model=d.model, notes=d.notes)
                            for d in node_in.devices
                        ],
                    )
                )
                results.append(_integrate_node(node.node_id))
        return {
            "lab_id": lab.lab_id,
            "testbed_id": tb.testbed_id,
            "nodes": results,
        }

    # -- schedule -------------------------------------------------------------------

    @app.get(f"{API}/nodes/{{node_id}}/schedule", **guarded)
    def node_schedule(
        node_id: str,
        window_start: Optional[str] = None,
        window_end: Optional[str] = None,
        format: str = "json",
    ):
        start = parse_utc(window_start) if window_start else None
        end = parse_utc(window_end) if window_end else None
        entries = plane.scheduler.get_schedule(node_id, start, end)
        if format == "json":
            return [_reservation_dict(r) for r in entries]
        if format == "ics":
            lines = [f"BEGIN:SCHEDULE {node_id}"]
            for r in entries:
                lines.append(
                    f"RES;ID={r.reservation_id};DTSTART={iso_utc(r.start_at)};"
                    f"DTEND={iso_utc(r.end_at)};STATUS={r.status.value}"
                )
            lines.append("END:SCHEDULE")
            return PlainTextResponse("\n".join(lines) + "\n")
        raise FedplaneError("BAD_FORMAT", f"unknown schedule format {format!r}")

    @app.get(f"{API}/reservations", **guarded)
    def list_reservations(node_id: Optional[str] = None):
        if node_id:
            return [_reservation_dict(r) for r in plane.scheduler.get_schedule(node_id)]
        rows = store.read().execute(
            "SELECT reservation_id FROM reservations ORDER BY start_at, reservation_id"
        ).fetchall()
        return [
            _reservation_dict(plane.scheduler.get_reservation(r["reservation_id"]))
            for r in rows
        ]

    @app.post(f"{API}/reservations", **guarded)
    def create_reservation(body: ReservationIn, request: Request):
        reservation = plane.scheduler.create_reservation(
            _user(request).user_id,
            body.node_ids,
            _parse_when(body.start_at, "start_at"),
            _parse_when(body.end_at, "end_at"),
        )
        return _reservation_dict(reservation)

    @app.delete(f"{API}/reservations/{{reservation_id}}", **guarded)
    def cancel_reservation(reservation_id: str, request: Request):
        reservation = plane.scheduler.cancel_reservation(
            reservation_id, _user(request).user_id
        )
        return _reservation_dict(reservation)

    # -- sessions --------------------------------------------------------------------

    @app.get(f"{API}/sessions/latency", **guarded)
    def latency_stats(node_id: Optional[str] = None, testbed_id: Optional[str] = None):
        stats = plane.sessions.latency_stats(node_id=node_id, testbed_id=testbed_id)
        if stats is None:
            return {"count": 0}
        return {
            "average_s": stats.average_s,
            "maximum_s": stats.maximum_s,
            "minimum_s": stats.minimum_s,
            "count": stats.count,
        }

    @app.get(f"{API}/sessions/latency.csv", **guarded)
    def latency_csv(node_id: Optional[str] = None, testbed_id: Optional[str] = None):
        return PlainTextResponse(
            plane.sessions.latency_csv(node_id=node_id, testbed_id=testbed_id),
            media_type="text/csv",
        )

    @app.get(f"{API}/sessions", **guarded)
    def list_sessions(node_id: Optional[str] = None):
        return [_session_dict(s) for s in plane.sessions.list_sessions(node_id=node_id)]

    @app.post(f"{API}/sessions", **guarded)
    def connect(body: SessionIn, request: Request):
        session = plane.sessions.connect(_user(request).user_id, body.node_id)
        return _session_dict(session)

    @app.get(f"{API}/sessions/{{session_id}}", **guarded)
    def get_session(session_id: str):
        return _session_dict(plane.sessions.get_session(session_id))

    @app.delete(f"{API}/sessions/{{session_id}}", **guarded)
    def disconnect(session_id: str, request: Request):
        return _session_dict(
            plane.sessions.disconnect(session_id, _user(request).user_id)
        )

    @app.post(f"{API}/images", **guarded)
    def bind_image(body: ImageBindingIn, request: Request):
        binding = plane.sessions.bind_image(
            _user(request).user_id,
            body.target_kind,
            body.target_id,
            body.image_ref,
            body.description,
        )
        return {
            "binding_id": binding.binding_id,
            "target_kind": binding.target_kind,
            "target_id": binding.target_id,
            "image_ref": binding.image_ref,
            "description": binding.description,
        }

    # -- artifacts ---------------------------------------------------------------------

    @app.post(f"{API}/artifacts", **guarded)
    async def upload_artifact(
        request: Request,
        kind: str = Form(...),
        namespace: str = Form(...),
        descriptors: str = Form("{}"),
        checksum: str = Form(""),
        file: UploadFile = File(...),
    ):
        data = await file.read()
        entry = plane.repos.upload_artifact(
            _user(request).user_id,
            ArtifactKind(kind),
            namespace,
            file.filename or "artifact.bin",
            data,
            descriptors=json.loads(descriptors),
            claimed_sha256=checksum or None,
        )
        return _artifact_dict(entry)

    @app.get(f"{API}/artifacts", **guarded)
    def list_artifacts(
        namespace: Optional[str] = None,
        kind: Optional[str] = None,
        node_id: Optional[str] = None,
    ):
        entries = plane.repos.list_artifacts(
            namespace=namespace,
            kind=ArtifactKind(kind) if kind else None,
            node_id=node_id,
        )
        return [_artifact_dict(e) for e in entries]

    @app.get(f"{API}/artifacts/{{artifact_id}}", **guarded)
    def fetch_artifact(artifact_id: str):
        data, entry = plane.repos.fetch_artifact(artifact_id)
        return Response(
            content=data,
            media_type="application/octet-stream",
            headers={
                "X-Checksum-SHA256": entry.checksum,
                "Content-Disposition": f'attachment; filename="{entry.filename}"',
            },
        )

    # -- fleet / commands -----------------------------------------------------------------

    @app.get(f"{API}/fleet", **guarded)
    def fleet():
        return {
            "revision": store.revision(),
            "heartbeat_interval_s": plane.config.engine.heartbeat_interval_s,
            "agent_memory_budget_mb": plane.config.engine.agent_memory_budget_mb,
            "entries": plane.engine.fleet_dashboard(),
        }

    @app.post(f"{API}/nodes/{{node_id}}/commands", **guarded)
    def dispatch_command(node_id: str, body: CommandIn):
        cmd = plane.engine.dispatch_command(node_id, body.argv, body.timeout_s)
        return _command_dict(cmd)

    @app.get(f"{API}/commands/{{command_id}}", **guarded)
    def get_command(command_id: str):
        return _command_dict(plane.engine.get_command(command_id))

    # -- agent protocol ---------------------------------------------------------------------

    @app.post(f"{API}/agent/enroll", **guarded)
    def agent_enroll(body: EnrollIn):
        grant = plane.engine.enroll(
            body.activation_id,
            body.activation_code,
            agent_version=body.agent_version,
            host_facts=body.host_facts,
        )
        return {
            "node_id": grant.node_id,
            "agent_token": grant.agent_token,
            "heartbeat_interval_s": plane.config.engine.heartbeat_interval_s,
        }

    @app.post(f"{API}/agent/heartbeat", **guarded)
    def agent_heartbeat(body: HeartbeatIn, request: Request):
        reply = plane.engine.heartbeat(
            request.state.agent_token, body.metrics, body.agent_version
        )
        return {
            "acknowledged": reply.acknowledged,
            "node_state": reply.node_state.value,
            "commands": [_agent_command_dict(c) for c in reply.commands],
        }

    @app.post(f"{API}/agent/result", **guarded)
    def agent_result(body: ResultIn, request: Request):
        plane.engine.report_result(
            request.state.agent_token,
            body.command_id,
            body.exit_status,
            body.output,
            timed_out=body.timed_out,
            detail=body.detail,
        )
        return {"acknowledged": True}

    # -- static portal assets ----------------------------------------------------------------

    if cfg.ui_dir:
        from pathlib import Path

        from fastapi.staticfiles import StaticFiles

        ui = Path(cfg.ui_dir)
        if ui.is_dir():
            app.mount("/ui", StaticFiles(directory=str(ui), html=True), name="ui")

    _assert_policy_complete(app)
    return app


_DUMMY_HASH = hash_credential("timing-equalizer")


def _assert_policy_complete(app: FastAPI) -> None:
    """Fail app construction if any API route lacks an access policy."""
    from fastapi.routing import APIRoute

    for route in app.routes:
        if not isinstance(route, APIRoute):
            continue
        for method in route.methods - {"HEAD", "OPTIONS"}:
            if (method, route.path_format) not in POLICY:
                raise RuntimeError(
                    f"route {method} {route.path_format} has no access policy"
                )


def bootstrap_admin(plane: ControlPlane, username: str, password: str) -> Optional[UserRecord]:
    """Create the initial admin when the user table is empty."""
    if plane.store.query(entity_kind="user"):
        return None
    return plane.store.create_user(username, password, Role.ADMIN)
