"""Gateway surface: auth, RBAC policy coverage, audit trail, error
envelope, testbed integration orchestration, and the REST endpoints."""
from __future__ import annotations

import hashlib
import json

import pytest
from fastapi.routing import APIRoute
from fastapi.testclient import TestClient

from fedplane.errors import FedplaneError
from fedplane.gateway import API, POLICY, create_app
from fedplane.store import FederationState
from helpers import enroll_node, make_testbed


@pytest.fixture
def api(plane, users):
    client = TestClient(create_app(plane), raise_server_exceptions=False)

    def login(username):
        response = client.post(
            f"{API}/login", json={"username": username, "credential": username}
        )
        assert response.status_code == 200, response.text
        return response.json()["token"]

    tokens = {name: login(name) for name in ("admin", "owner", "experimenter")}

    def call(method, path, token="admin", **kwargs):
        headers = kwargs.pop("headers", {})
        if token:
            headers["Authorization"] = f"Bearer {tokens[token]}"
        return client.request(method, path, headers=headers, **kwargs)

    return {"client": client, "tokens": tokens, "call": call}


class TestLogin:
    def test_token_ttl(self, api, plane, clock):
        body = api["client"].post(
            f"{API}/login", json={"username": "owner", "credential": "owner"}
        ).json()
        issued = plane.clock()
        from fedplane.clock import parse_utc

        assert parse_utc(body["expires_at"]) - issued == pytest.approx(
            plane.config.gateway.token_ttl_s, abs=5
        )

    def test_wrong_password_and_unknown_user_identical(self, api):
        wrong = api["client"].post(
            f"{API}/login", json={"username": "owner", "credential": "nope"}
        )
        unknown = api["client"].post(
            f"{API}/login", json={"username": "ghost", "credential": "nope"}
        )
        assert wrong.status_code == unknown.status_code == 401
        assert wrong.content == unknown.content

    def test_expired_token_rejected(self, api, plane, clock):
        clock.advance(plane.config.gateway.token_ttl_s + 1)
        response = api["call"]("GET", f"{API}/labs", token="owner")
        assert response.status_code == 401
        assert response.json()["code"] == "UNAUTHORIZED"


class TestPolicyCoverage:
    def test_every_route_has_policy(self, api):
        app = api["client"].app
        covered = set()
        for route in app.routes:
            if not isinstance(route, APIRoute):
                continue
            for method in route.methods - {"HEAD", "OPTIONS"}:
                assert (method, route.path_format) in POLICY, route.path_format
                covered.add((method, route.path_format))
        # No stale policy entries either.
        assert covered == set(POLICY)

    def test_unannotated_route_fails_construction(self, plane):
        app = create_app(plane)

        @app.get(f"{API}/rogue")
        def rogue():
            return {}

        from fedplane.gateway import _assert_policy_complete

        with pytest.raises(RuntimeError, match="rogue"):
            _assert_policy_complete(app)

    def test_missing_token_unauthorized(self, api):
        response = api["call"]("GET", f"{API}/labs", token=None)
        assert response.status_code == 401


class TestRbac:
    CASES = [
        ("POST", "/labs", "experimenter", 403),
        ("POST", "/labs", "owner", 200),
        ("POST", "/users", "owner", 403),
        ("GET", "/fleet", "experimenter", 200),
    ]

    @pytest.mark.parametrize("method,path,role,expected", CASES)
    def test_role_matrix(self, api, method, path, role, expected):
        body = {"name": "L"} if path == "/labs" else {"username": "u", "password": "p"}
        response = api["call"](method, f"{API}{path}", token=role, json=body)
        assert response.status_code == expected, response.text

    def test_dispatch_requires_admin(self, api, plane, store, users):
        _, _, nodes = make_testbed(store, users)
        enroll_node(plane, nodes[0].node_id)
        denied = api["call"](
            "POST",
            f"{API}/nodes/{nodes[0].node_id}/commands",
            token="owner",
            json={"argv": ["true"]},
        )
        assert denied.status_code == 403
        allowed = api["call"](
            "POST",
            f"{API}/nodes/{nodes[0].node_id}/commands",
            token="admin",
            json={"argv": ["true"]},
        )
        assert allowed.status_code == 200

    def test_only_lab_owner_may_add_testbeds(self, api, plane, store, users):
        other = api["call"]("POST", f"{API}/users", json={
            "username": "owner2", "password": "owner2", "role": "OWNER"})
        assert other.status_code == 200
        lab = api["call"]("POST", f"{API}/labs", token="owner", json={"name": "Mine"}).json()
        login = api["client"].post(
            f"{API}/login", json={"username": "owner2", "credential": "owner2"}
        ).json()
        response = api["client"].post(
            f"{API}/testbeds",
            json={"lab_id": lab["lab_id"], "public_name": "T"},
            headers={"Authorization": f"Bearer {login['token']}"},
        )
        assert response.status_code == 403


class TestErrorEnvelope:
    def test_not_found_shape(self, api):
        response = api["call"]("GET", f"{API}/nodes/unknown-id")
        assert response.status_code == 404
        body = response.json()
        assert set(body) == {"code", "message", "details"}
        assert body["code"] == "NOT_FOUND"

    def test_validation_error_shape(self, api):
        response = api["call"]("POST", f"{API}/labs", token="owner", json={})
        assert response.status_code == 422
        assert response.json()["code"] == "VALIDATION"
        assert "body.name" in response.json()["details"]


class TestAudit:
    def test_exactly_one_record_per_response(self, api, plane):
        before = len(plane.store.audit_entries())
        api["call"]("GET", f"{API}/labs")                      # 200
        api["call"]("GET", f"{API}/nodes/missing")             # 404
        api["call"]("POST", f"{API}/labs", token="experimenter", json={"name": "x"})  # 403
        api["client"].post(f"{API}/login", json={"username": "ghost", "credential": "x"})  # 401
        entries = plane.store.audit_entries()
        assert len(entries) == before + 4
        outcomes = [e["outcome"] for e in entries[-4:]]
        assert outcomes == ["200", "404", "403", "401"]

    def test_enroll_failures_distinguished_only_in_audit(self, api, plane, store, users):
        _, _, nodes = make_testbed(store, users)
        record = plane.engine.issue_activation(nodes[0].node_id)
        ok = api["client"].post(
            f"{API}/agent/enroll",
            json={"activation_id": record.activation_id, "activation_code": record.activation_code},
        )
        assert ok.status_code == 200
        replay = api["client"].post(
            f"{API}/agent/enroll",
            json={"activation_id": record.activation_id, "activation_code": record.activation_code},
        )
        bad_code = api["client"].post(
            f"{API}/agent/enroll",
            json={"activation_id": record.activation_id, "activation_code": "wrong"},
        )
        # Externally indistinguishable...
        assert replay.status_code == bad_code.status_code == 403
        assert replay.json() == bad_code.json()
        assert replay.json()["code"] == "REJECTED"
        # ...but the audit log knows why.
        details = [
            e["detail"]
            for e in plane.store.audit_entries()
            if e["action"] == f"POST {API}/agent/enroll"
        ]
        assert details[-2:] == ["ALREADY_CONSUMED", "INVALID_CODE"]

    def test_actor_recorded(self, api, plane):
        api["call"]("GET", f"{API}/labs", token="owner")
        last = plane.store.audit_entries()[-1]
        assert last["actor"] == "owner"


class TestIntegrateTestbed:
    VALID = {
        "lab_name": "WINGS Lab",
        "public_name": "NeXT Communication Testbed",
        "description": "general purpose 5G+ experimentation",
        "nodes": [
            {
                "public_identifier": "Master Server",
                "control_mode": "CENTRALIZED",
                "devices": [
                    {"kind": "workstation", "model": "Dell Precision 7920"},
                    {"kind": "SDR", "model": "USRP X310"},
                ],
            }
        ],
    }

    def test_single_node_returns_one_script(self, api, plane):
        response = api["call"]("POST", f"{API}/integrate", token="owner", json=self.VALID)
        assert response.status_code == 200, response.text
        body = response.json()
        assert len(body["nodes"]) == 1
        script = body["nodes"][0]["script"]
        assert "--activation-id" in script and "--activation-code" in script
        node = plane.store.get_node(body["nodes"][0]["node_id"])
        assert node.federation_state is FederationState.ACTIVATION_ISSUED

    def test_distributed_testbed_gets_distinct_scripts(self, api):
        request = {
            "lab_name": "SDR Lab",
            "public_name": "Distributed SDR Grid",
            "description": "three independent control interfaces",
            "nodes": [
                {
                    "public_identifier": f"ci-{i}",
                    "control_mode": "DISTRIBUTED",
                    "devices": [{"kind": "SDR", "model": "USRP B210"}],
                }
                for i in range(3)
            ],
        }
        body = api["call"]("POST", f"{API}/integrate", token="owner", json=request).json()
        scripts = [n["script"] for n in body["nodes"]]
        assert len(scripts) == len(set(scripts)) == 3

    def test_missing_fields_enumerated(self, api):
        request = json.loads(json.dumps(self.VALID))
        request["nodes"][0]["public_identifier"] = ""
        request["description"] = ""
        response = api["call"]("POST", f"{API}/integrate", token="owner", json=request)
        assert response.status_code == 422
        details = response.json()["details"]
        assert "nodes[0].public_identifier" in details
        assert "description" in details

    def test_duplicate_testbed_rolls_back_everything(self, api, plane):
        api["call"]("POST", f"{API}/integrate", token="owner", json=self.VALID)
        nodes_before = len(plane.store.query(entity_kind="node"))
        labs_before = len(plane.store.query(entity_kind="lab"))
        response = api["call"]("POST", f"{API}/integrate", token="owner", json=self.VALID)
        assert response.status_code == 409
        assert response.json()["code"] == "DUPLICATE"
        assert len(plane.store.query(entity_kind="node")) == nodes_before
        assert len(plane.store.query(entity_kind="lab")) == labs_before

    def test_midflow_fault_leaves_no_partial_records(self, api, plane, monkeypatch):
        calls = {"n": 0}
        real = plane.engine.generate_script

        def flaky(node_id):
            calls["n"] += 1
            if calls["n"] == 2:
                raise FedplaneError("NO_ACTIVATION", "injected fault")
            return real(node_id)

        monkeypatch.setattr(plane.engine, "generate_script", flaky)
        request = {
            "lab_name": "Atomic Lab",
            "public_name": "Atomic Testbed",
            "description": "fault injection",
            "nodes": [
                {"public_identifier": f"n{i}", "devices": [{"kind": "sensor"}]}
                for i in range(2)
            ],
        }
        response = api["call"]("POST", f"{API}/integrate", token="owner", json=request)
        assert response.status_code == 409
        assert plane.store.query(entity_kind="node") == []
        assert all(l.name != "Atomic Lab" for l in plane.store.query(entity_kind="lab"))

    def test_reuses_own_lab(self, api, plane):
        api["call"]("POST", f"{API}/integrate", token="owner", json=self.VALID)
        second = json.loads(json.dumps(self.VALID))
        second["public_name"] = "NeXT Annex"
        api["call"]("POST", f"{API}/integrate", token="owner", json=second)
        labs = [l for l in plane.store.query(entity_kind="lab") if l.name == "WINGS Lab"]
        assert len(labs) == 1


class TestNodeLifecycleRoutes:
    def test_register_then_integrate_single_node(self, api, plane):
        lab = api["call"]("POST", f"{API}/labs", token="owner", json={"name": "L"}).json()
        tb = api["call"](
            "POST",
            f"{API}/testbeds",
            token="owner",
            json={"lab_id": lab["lab_id"], "public_name": "T", "description": "d"},
        ).json()
        node = api["call"](
            "POST",
            f"{API}/testbeds/{tb['testbed_id']}/nodes",
            token="owner",
            json={"public_identifier": "n1", "devices": [{"kind": "sensor"}]},
        ).json()
        # Automatic association: the node context shows its testbed edge.
        ctx = api["call"]("GET", f"{API}/nodes/{node['node_id']}").json()
        relations = {e["relation"] for e in ctx["edges"]}
        assert "NODE_IN_TESTBED" in relations
        integrated = api["call"](
            "POST", f"{API}/nodes/{node['node_id']}/integrate", token="owner"
        ).json()
        assert integrated["script"].startswith("#!/bin/sh")
        script = api["call"](
            "GET", f"{API}/nodes/{node['node_id']}/script", token="owner"
        )
        assert script.headers["content-type"].startswith("text/x-shellscript")
        assert script.text == integrated["script"]


class TestAgentProtocolHttp:
    def test_enroll_heartbeat_result(self, api, plane, store, users):
        _, _, nodes = make_testbed(store, users)
        record = plane.engine.issue_activation(nodes[0].node_id)
        grant = api["client"].post(
            f"{API}/agent/enroll",
            json={
                "activation_id": record.activation_id,
                "activation_code": record.activation_code,
                "agent_version": "it",
            },
        ).json()
        token = grant["agent_token"]
        cmd = api["call"](
            "POST",
            f"{API}/nodes/{nodes[0].node_id}/commands",
            json={"argv": ["printf", "hi"], "timeout_s": 5},
        ).json()
        beat = api["client"].post(
            f"{API}/agent/heartbeat",
            json={"metrics": {"agent_memory_mb": 180}},
            headers={"Authorization": f"Bearer {token}"},
        ).json()
        assert beat["node_state"] == "FEDERATED"
        assert [c["command_id"] for c in beat["commands"]] == [cmd["command_id"]]
        done = api["client"].post(
            f"{API}/agent/result",
            json={"command_id": cmd["command_id"], "exit_status": 0, "output": "hi"},
            headers={"Authorization": f"Bearer {token}"},
        )
        assert done.status_code == 200
        final = api["call"]("GET", f"{API}/commands/{cmd['command_id']}").json()
        assert final["status"] == "SUCCEEDED"
        fleet = api["call"]("GET", f"{API}/fleet").json()
        assert fleet["entries"][0]["metrics"]["agent_memory_mb"] == 180
        assert fleet["revision"] > 0

    def test_heartbeat_without_token_unauthorized(self, api):
        response = api["client"].post(f"{API}/agent/heartbeat", json={"metrics": {}})
        assert response.status_code == 401


class TestScheduleRoutes:
    @pytest.fixture
    def node_id(self, plane, store, users):
        _, _, nodes = make_testbed(store, users)
        enroll_node(plane, nodes[0].node_id)
        return nodes[0].node_id

    def test_reserve_list_cancel(self, api, plane, node_id, clock):
        start, end = plane.clock() + 3600, plane.clock() + 7200
        created = api["call"](
            "POST",
            f"{API}/reservations",
            token="experimenter",
            json={"node_ids": [node_id], "start_at": start, "end_at": end},
        )
        assert created.status_code == 200, created.text
        rid = created.json()["reservation_id"]
        listed = api["call"]("GET", f"{API}/nodes/{node_id}/schedule").json()
        assert [r["reservation_id"] for r in listed] == [rid]
        conflict = api["call"](
            "POST",
            f"{API}/reservations",
            token="owner",
            json={"node_ids": [node_id], "start_at": start + 600, "end_at": end + 600},
        )
        assert conflict.status_code == 409
        assert rid in conflict.json()["details"]
        cancelled = api["call"](
            "DELETE", f"{API}/reservations/{rid}", token="experimenter"
        )
        assert cancelled.json()["status"] == "CANCELLED"

    def test_ics_listing(self, api, plane, node_id):
        start, end = plane.clock() + 3600, plane.clock() + 7200
        api["call"](
            "POST",
            f"{API}/reservations",
            token="experimenter",
            json={"node_ids": [node_id], "start_at": start, "end_at": end},
        )
        text = api["call"](
            "GET", f"{API}/nodes/{node_id}/schedule", params={"format": "ics"}
        ).text
        assert text.startswith(f"BEGIN:SCHEDULE {node_id}")
        assert "DTSTART=" in text and "DTEND=" in text
        assert text.rstrip().endswith("END:SCHEDULE")

    def test_iso_timestamps_accepted(self, api, node_id):
        created = api["call"](
            "POST",
            f"{API}/reservations",
            token="experimenter",
            json={
                "node_ids": [node_id],
                "start_at": "2023-11-20T10:00:00+00:00",
                "end_at": "2023-11-20T11:00:00+00:00",
            },
        )
        assert created.status_code == 200
        assert created.json()["start_at"] == "2023-11-20T10:00:00+00:00"


class TestArtifactRoutes:
    @pytest.fixture
    def namespace(self, plane, store, users):
        _, _, nodes = make_testbed(store, users)
        enroll_node(plane, nodes[0].node_id)
        return store.get_node(nodes[0].node_id).namespace

    def test_multipart_round_trip(self, api, namespace):
        payload = b"dataset bytes\x00\x01"
        checksum = hashlib.sha256(payload).hexdigest()
        uploaded = api["call"](
            "POST",
            f"{API}/artifacts",
            token="experimenter",
            data={
                "kind": "DATASET",
                "namespace": namespace,
                "checksum": checksum,
                "descriptors": json.dumps({"experiment_context": "uplink trial"}),
            },
            files={"file": ("trial.bin", payload)},
        )
        assert uploaded.status_code == 200, uploaded.text
        artifact = uploaded.json()
        assert artifact["checksum"] == checksum
        listed = api["call"]("GET", f"{API}/artifacts", params={"namespace": namespace}).json()
        assert [a["artifact_id"] for a in listed] == [artifact["artifact_id"]]
        fetched = api["call"]("GET", f"{API}/artifacts/{artifact['artifact_id']}")
        assert fetched.content == payload
        assert fetched.headers["X-Checksum-SHA256"] == checksum

    def test_checksum_mismatch_rejected(self, api, namespace):
        response = api["call"](
            "POST",
            f"{API}/artifacts",
            token="experimenter",
            data={"kind": "CODE", "namespace": namespace, "checksum": "0" * 64},
            files={"file": ("x.py", b"print()")},
        )
        assert response.status_code == 422
        assert response.json()["code"] == "CHECKSUM_MISMATCH"


class TestIdempotency:
    def test_replayed_post_returns_first_result(self, api, plane):
        headers = {"Idempotency-Key": "create-lab-1"}
        first = api["call"]("POST", f"{API}/labs", token="owner", json={"name": "L"},
                            headers=dict(headers))
        second = api["call"]("POST", f"{API}/labs", token="owner", json={"name": "L"},
                             headers=dict(headers))
        assert first.json() == second.json()
        assert second.headers.get("Idempotency-Replayed") == "true"
        assert len([l for l in plane.store.query(entity_kind="lab") if l.name == "L"]) == 1

    def test_different_keys_create_separately(self, api, plane):
        api["call"]("POST", f"{API}/labs", token="owner", json={"name": "M"},
                    headers={"Idempotency-Key": "a"})
        api["call"]("POST", f"{API}/labs", token="owner", json={"name": "M"},
                    headers={"Idempotency-Key": "b"})
        assert len([l for l in plane.store.query(entity_kind="lab") if l.name == "M"]) == 2


class TestLatencyRoutes:
    def test_stats_and_csv(self, api, plane, store, users, clock):
        _, tb, nodes = make_testbed(store, users)
        grant = enroll_node(plane, nodes[0].node_id)
        plane.sessions.bind_image(users["owner"].user_id, "testbed", tb.testbed_id, "img")
        session = api["call"](
            "POST", f"{API}/sessions", token="experimenter",
            json={"node_id": nodes[0].node_id},
        ).json()
        clock.advance(3.0)
        reply = plane.engine.heartbeat(grant.agent_token, {})
        for cmd in reply.commands:
            plane.engine.report_result(
                grant.agent_token, cmd.command_id, 0, "",
                detail={"access_url": "http://127.0.0.1:36000/"},
            )
        stats = api["call"]("GET", f"{API}/sessions/latency", token="experimenter").json()
        assert stats["count"] == 1
        assert stats["average_s"] == pytest.approx(3.0, abs=1e-3)
        csv_text = api["call"]("GET", f"{API}/sessions/latency.csv", token="experimenter").text
        assert csv_text.splitlines()[0] == "session_id,node_id,requested_at,ready_at,latency_s"
        assert session["session_id"] in csv_text
