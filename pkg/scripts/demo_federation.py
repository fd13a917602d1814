#!/usr/bin/env python3
"""Interactive-speed demo of the two-step federation flow, in one process.

Integrates a testbed through the gateway API, prints the generated
deployment script, "runs" it by enrolling a simulated agent, then connects
a session and prints the access URL and fleet dashboard.
"""
from __future__ import annotations

import re
import tempfile
from pathlib import Path

from fastapi.testclient import TestClient

from fedplane.agent import AgentConfig, AgentRuntime
from fedplane.config import PlaneConfig
from fedplane.gateway import create_app
from fedplane.harness.shim import InProcessTransport
from fedplane.plane import ControlPlane
from fedplane.store import Role


def main() -> int:
    workdir = Path(tempfile.mkdtemp(prefix="fedplane-demo-"))
    plane = ControlPlane(
        PlaneConfig(db_path=str(workdir / "demo.db"), blob_root=str(workdir / "blobs"))
    )
    plane.store.create_user("owner", "owner", Role.OWNER)
    plane.store.create_user("alice", "alice", Role.EXPERIMENTER)
    client = TestClient(create_app(plane))

    token = client.post(
        "/v1/login", json={"username": "owner", "credential": "owner"}
    ).json()["token"]
    auth = {"Authorization": f"Bearer {token}"}

    print("step 1: submit the integration request")
    result = client.post(
        "/v1/integrate",
        json={
            "lab_name": "Demo Lab",
            "public_name": "Desk Testbed",
            "description": "single workstation with a software-defined front end",
            "nodes": [
                {
                    "public_identifier": "workstation-1",
                    "control_mode": "CENTRALIZED",
                    "devices": [{"kind": "SDR", "model": "desk-sim"}],
                }
            ],
        },
        headers=auth,
    ).json()
    node = result["nodes"][0]
    print("\n--- generated one-shot deployment script ---")
    print(node["script"])
    print("--- end script ---\n")

    print("step 2: run the script on the control interface (simulated here)")
    agent = AgentRuntime(
        AgentConfig(
            server_url="http://demo.local",
            activation_id=re.search(r"--activation-id\s+(\S+)", node["script"]).group(1),
            activation_code=re.search(r"--activation-code\s+(\S+)", node["script"]).group(1),
            state_dir=str(workdir / "agent"),
            runtime="mock",
        ),
        transport=InProcessTransport(client),
    )
    agent.enroll()
    agent.step()

    client.post(
        "/v1/images",
        json={
            "target_kind": "testbed",
            "target_id": result["testbed_id"],
            "image_ref": "registry.example/desk:latest",
        },
        headers=auth,
    )

    alice = client.post(
        "/v1/login", json={"username": "alice", "credential": "alice"}
    ).json()["token"]
    session = client.post(
        "/v1/sessions",
        json={"node_id": node["node_id"]},
        headers={"Authorization": f"Bearer {alice}"},
    ).json()
    agent.step()
    agent.drain()
    ready = client.get(
        f"/v1/sessions/{session['session_id']}",
        headers={"Authorization": f"Bearer {alice}"},
    ).json()
    print(f"session {ready['state']}: access link {ready['access_url']}")

    fleet = client.get("/v1/fleet", headers=auth).json()
    for entry in fleet["entries"]:
        print(
            f"fleet: {entry['public_identifier']}  state={entry['federation_state']}  "
            f"liveness={entry['liveness']}  namespace={entry['namespace']}"
        )

    client.delete(
        f"/v1/sessions/{session['session_id']}",
        headers={"Authorization": f"Bearer {alice}"},
    )
    agent.step()
    agent.drain()
    agent.close()
    plane.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
