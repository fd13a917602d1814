"""Scenario runner: an in-process control plane, simulated agents, and the
full federation / reservation / session pipeline, measured and checked.

All traffic uses the production surfaces: users (the harness) call the
gateway REST API, agents speak the real agent protocol through a transport
shim that injects link delay and loss. Under time_mode=virtual a manual
clock replaces wall time (delays advance it), execution is sequential, and
the resulting report is byte-identical for a fixed seed.
"""
from __future__ import annotations

import logging
import random
import re
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import httpx

from ..agent import AgentConfig, AgentRuntime
from ..clock import ManualClock
from ..config import EngineConfig, PlaneConfig
from ..errors import FedplaneError
from ..federation import CommandStatus
from ..gateway import create_app
from ..plane import ControlPlane
from ..scheduler import ReservationStatus, intervals_overlap
from ..store import Role
from .report import LatencyReport
from .scenario import ScenarioSpec
from .shim import FaultyTransport, InProcessTransport

logger = logging.getLogger(__name__)

_ACTIVATION_ID_RE = re.compile(r"--activation-id\s+(\S+)")
_ACTIVATION_CODE_RE = re.compile(r"--activation-code\s+(\S+)")

OWNER_PASSWORD = "owner-pass-0"
EXPERIMENTER_PASSWORD = "exp-pass-0"
ADMIN_PASSWORD = "admin-pass-0"


class _ApiUser:
    """Tiny authenticated REST helper over the in-process client."""

    def __init__(self, client, token: str):
        self.client = client
        self.token = token

    def _headers(self) -> dict:
        return {"Authorization": f"Bearer {self.token}"}

    def get(self, path: str, **params):
        return self.client.get(path, params=params or None, headers=self._headers())

    def post(self, path: str, body: dict):
        return self.client.post(path, json=body, headers=self._headers())

    def delete(self, path: str):
        return self.client.delete(path, headers=self._headers())


def _expect(response, what: str):
    if response.status_code >= 300:
        raise FedplaneError(
            "SCENARIO_FAILED", f"{what} failed: {response.status_code} {response.text}"
        )
    return response.json()


def run_scenario(
    spec: ScenarioSpec,
    workdir: Optional[str] = None,
    keep_workdir: bool = False,
) -> LatencyReport:
    """Execute the scenario and return the latency report; raises
    SCENARIO_FAILED naming the first violated invariant."""
    spec.validate()
    own_workdir = workdir is None
    workdir = workdir or tempfile.mkdtemp(prefix="fedplane-harness-")
    root = Path(workdir)
    virtual = spec.time_mode == "virtual"
    clock = ManualClock(auto_advance=1e-6) if virtual else time.time
    wall_started = time.monotonic()
    virtual_started = clock() if virtual else 0.0

    config = PlaneConfig(
        db_path=str(root / "plane.db"),
        blob_root=str(root / "blobs"),
        engine=EngineConfig(delivered_grace_s=2.0),
    )
    plane = ControlPlane(config, clock=clock)
    app = create_app(plane)

    from fastapi.testclient import TestClient

    client = TestClient(app, raise_server_exceptions=False)
    rng = random.Random(spec.seed)
    wait = clock.advance if virtual else time.sleep
    transport = FaultyTransport(
        InProcessTransport(client),
        rng=rng,
        delay_s=spec.delay_ms / 1000.0,
        delay_max_s=spec.delay_ms_max / 1000.0,
        drop_rate=0.0,  # enabled for the command phase only
        wait=wait,
    )

    agents: list[AgentRuntime] = []
    violations: list[str] = []
    checks_passed: list[str] = []
    url_probe_failures: list[str] = []

    def check(name: str, ok: bool, detail: str = "") -> None:
        if ok:
            checks_passed.append(name)
        else:
            violations.append(f"{name}: {detail}" if detail else name)

    try:
        # -- users -----------------------------------------------------------
        plane.store.create_user("admin", ADMIN_PASSWORD, Role.ADMIN)
        plane.store.create_user("owner", OWNER_PASSWORD, Role.OWNER)
        plane.store.create_user("experimenter", EXPERIMENTER_PASSWORD, Role.EXPERIMENTER)
        owner = _ApiUser(
            client,
            _expect(
                client.post(
                    "/v1/login", json={"username": "owner", "credential": OWNER_PASSWORD}
                ),
                "owner login",
            )["token"],
        )
        experimenter = _ApiUser(
            client,
            _expect(
                client.post(
                    "/v1/login",
                    json={"username": "experimenter", "credential": EXPERIMENTER_PASSWORD},
                ),
                "experimenter login",
            )["token"],
        )
        admin = _ApiUser(
            client,
            _expect(
                client.post(
                    "/v1/login", json={"username": "admin", "credential": ADMIN_PASSWORD}
                ),
                "admin login",
            )["token"],
        )

        # -- integrate + enroll ------------------------------------------------
        node_ids: list[str] = []
        federation_started = time.monotonic()
        for lab_i in range(spec.labs):
            for tb_i in range(spec.testbeds):
                nodes = []
                for node_i in range(spec.nodes):
                    if spec.control_mode_mix == "mixed":
                        mode = "CENTRALIZED" if node_i % 2 == 0 else "DISTRIBUTED"
                    else:
                        mode = spec.control_mode_mix.upper()
                    nodes.append(
                        {
                            "public_identifier": f"node-{lab_i + 1:02d}-{tb_i + 1:02d}-{node_i + 1:02d}",
                            "control_mode": mode,
                            "devices": [
                                {"kind": "SDR", "model": "sim-frontend", "notes": ""}
                            ],
                        }
                    )
                result = _expect(
                    owner.post(
                        "/v1/integrate",
                        {
                            "lab_name": f"Lab {lab_i + 1:02d}",
                            "public_name": f"Testbed {lab_i + 1:02d}-{tb_i + 1:02d}",
                            "description": "simulated testbed for harness runs",
                            "nodes": nodes,
                        },
                    ),
                    "integrate",
                )
                _expect(
                    owner.post(
                        "/v1/images",
                        {
                            "target_kind": "testbed",
                            "target_id": result["testbed_id"],
                            "image_ref": "registry.invalid/placeholder:latest",
                            "description": "harness placeholder image",
                        },
                    ),
                    "image binding",
                )
                for entry in result["nodes"]:
                    node_ids.append(entry["node_id"])
                    script = entry["script"]
                    activation_id = _ACTIVATION_ID_RE.search(script)
                    activation_code = _ACTIVATION_CODE_RE.search(script)
                    if not activation_id or not activation_code:
                        raise FedplaneError(
                            "SCENARIO_FAILED",
                            "deployment script lacks the activation pair",
                        )
                    agent = AgentRuntime(
                        AgentConfig(
                            server_url="http://fedplane.harness.local",
                            activation_id=activation_id.group(1),
                            activation_code=activation_code.group(1),
                            state_dir=str(root / "agents" / entry["node_id"]),
                            runtime="mock",
                            max_workers=2,
                        ),
                        transport=transport,
                        sleep=wait,
                    )
                    agent.enroll()
                    agents.append(agent)

        fleet = _expect(experimenter.get("/v1/fleet"), "fleet view")
        check(
            "all nodes federated",
            all(e["federation_state"] == "FEDERATED" for e in fleet["entries"])
            and len(fleet["entries"]) == spec.total_nodes,
            f"fleet: {[e['federation_state'] for e in fleet['entries']]}",
        )
        federation_s = time.monotonic() - federation_started

        # -- session flows ------------------------------------------------------
        per_node_sessions: dict[int, int] = {}
        for i in range(spec.session_count):
            idx = i % len(agents)
            per_node_sessions[idx] = per_node_sessions.get(idx, 0) + 1

        def node_flow(idx: int) -> None:
            agent = agents[idx]
            node_id = node_ids[idx]
            for _ in range(per_node_sessions.get(idx, 0)):
                agent.step()  # fresh heartbeat keeps the node ONLINE
                session = _expect(
                    experimenter.post("/v1/sessions", {"node_id": node_id}),
                    f"connect {node_id}",
                )
                session_id = session["session_id"]
                state = session["state"]
                for _ in range(200):
                    agent.step()
                    agent.drain(timeout_s=30.0)
                    session = _expect(
                        experimenter.get(f"/v1/sessions/{session_id}"),
                        "session poll",
                    )
                    state = session["state"]
                    if state in ("READY", "FAILED", "ENDED"):
                        break
                if state != "READY":
                    violations.append(
                        f"session {session_id} never became READY (state={state}, "
                        f"failure={session.get('failure')})"
                    )
                    return
                try:
                    probe = httpx.get(session["access_url"], timeout=5.0)
                    if probe.status_code != 200:
                        url_probe_failures.append(
                            f"{session['access_url']} -> {probe.status_code}"
                        )
                except httpx.HTTPError as exc:
                    url_probe_failures.append(f"{session['access_url']}: {exc}")
                _expect(
                    experimenter.delete(f"/v1/sessions/{session_id}"), "disconnect"
                )
                agent.step()
                agent.drain(timeout_s=30.0)

        parallelism = 1 if virtual else min(spec.parallelism, max(len(agents), 1))
        if spec.session_count:
            if parallelism == 1:
                for idx in sorted(per_node_sessions):
                    node_flow(idx)
            else:
                with ThreadPoolExecutor(max_workers=parallelism) as pool:
                    list(pool.map(node_flow, sorted(per_node_sessions)))

        # -- command phase --------------------------------------------------------
        command_stats: dict = {}
        if spec.command_count:
            transport.set_drop_rate(spec.drop_rate)
            command_ids = []
            for i in range(spec.command_count):
                node_id = node_ids[i % len(node_ids)]
                cmd = _expect(
                    admin.post(
                        f"/v1/nodes/{node_id}/commands",
                        {"argv": ["/bin/sh", "-c", "printf ok"], "timeout_s": 5.0},
                    ),
                    "dispatch",
                )
                command_ids.append(cmd["command_id"])
            deadline = time.monotonic() + 120.0
            while time.monotonic() < deadline:
                for agent in agents:
                    agent.step()
                for agent in agents:
                    agent.drain(timeout_s=30.0)
                plane.sweep()
                remaining = [
                    c
                    for c in plane.engine.list_commands()
                    if c.status in (CommandStatus.QUEUED, CommandStatus.DELIVERED)
                ]
                if not remaining:
                    break
                if not virtual:
                    time.sleep(0.05)
            transport.set_drop_rate(0.0)
            by_status: dict[str, int] = {}
            for command_id in command_ids:
                cmd = plane.engine.get_command(command_id)
                by_status[cmd.status.value] = by_status.get(cmd.status.value, 0) + 1
            command_stats = {
                "dispatched": len(command_ids),
                "by_status": dict(sorted(by_status.items())),
                "transport_calls": transport.calls,
                "transport_dropped": transport.dropped,
            }
            check(
                "all dispatched commands terminal",
                all(
                    plane.engine.get_command(cid).status in
                    (CommandStatus.SUCCEEDED, CommandStatus.FAILED, CommandStatus.TIMED_OUT)
                    for cid in command_ids
                ),
                str(command_stats),
            )

        # -- final sweep + invariants ------------------------------------------------
        for agent in agents:
            agent.step()
        plane.sweep()

        check("no url probe failures", not url_probe_failures, "; ".join(url_probe_failures))

        sessions = _expect(experimenter.get("/v1/sessions"), "session listing")
        check(
            "all sessions ended",
            all(s["state"] == "ENDED" for s in sessions) and len(sessions) == spec.session_count,
            f"states: {sorted({s['state'] for s in sessions})}",
        )
        samples = sorted(
            s["access_latency_s"] for s in sessions if s["access_latency_s"] is not None
        )
        check(
            "latency positive",
            all(x > 0 for x in samples) and len(samples) == spec.session_count,
            f"{len(samples)} samples",
        )
        if samples:
            avg = sum(samples) / len(samples)
            check(
                "min <= avg <= max",
                samples[0] <= avg <= samples[-1],
                f"min={samples[0]} avg={avg} max={samples[-1]}",
            )

        check(
            "zero running local sessions",
            all(not agent.sessions.running() for agent in agents),
            str([len(agent.sessions.running()) for agent in agents]),
        )
        leftovers = [
            c
            for c in plane.engine.list_commands()
            if c.status in (CommandStatus.QUEUED, CommandStatus.DELIVERED)
        ]
        check("zero queued commands", not leftovers, f"{len(leftovers)} pending")

        namespaces = [
            e["namespace"]
            for e in _expect(experimenter.get("/v1/fleet"), "fleet")["entries"]
        ]
        check(
            "namespaces unique",
            len(namespaces) == len(set(namespaces)) and None not in namespaces,
            str(namespaces),
        )

        rows = plane.store.read().execute(
            "SELECT r.reservation_id, r.start_at, r.end_at, rn.node_id FROM reservations r "
            "JOIN reservation_nodes rn ON r.reservation_id = rn.reservation_id "
            "WHERE r.status = ?",
            (ReservationStatus.ACTIVE.value,),
        ).fetchall()
        conflict = None
        by_node: dict[str, list] = {}
        for row in rows:
            by_node.setdefault(row["node_id"], []).append(row)
        for node_rows in by_node.values():
            for i in range(len(node_rows)):
                for j in range(i + 1, len(node_rows)):
                    a, b = node_rows[i], node_rows[j]
                    if intervals_overlap(
                        a["start_at"], a["end_at"], b["start_at"], b["end_at"]
                    ):
                        conflict = (a["reservation_id"], b["reservation_id"])
        check("no reservation conflicts", conflict is None, str(conflict))

        if violations:
            raise FedplaneError("SCENARIO_FAILED", violations[0], details=violations)

        runtime_s = (
            (clock() - virtual_started) if virtual else (time.monotonic() - wall_started)
        )
        report = LatencyReport(
            samples=samples,
            scenario=spec.echo(),
            runtime_s=round(runtime_s, 6),
            command_stats=command_stats,
            checks=checks_passed,
        )
        report.scenario["federation_s"] = round(federation_s, 6) if not virtual else 0.0
        return report
    finally:
        for agent in agents:
            try:
                agent.close()
            except Exception:
                logger.exception("agent close failed")
        plane.close()
        client.close()
        if own_workdir and not keep_workdir:
            shutil.rmtree(workdir, ignore_errors=True)
