"""Session orchestration: image binding precedence, the connect/disconnect
lifecycle over the agent command channel, and latency aggregation."""
from __future__ import annotations

import csv
import io

import pytest

from fedplane.errors import FedplaneError
from fedplane.federation import CommandStatus
from fedplane.scheduler import ReservationStatus
from fedplane.sessions import SessionState
from helpers import enroll_node, make_testbed


class ScriptedAgent:
    """Drives the real agent protocol at the engine level: one poll, then a
    canned response per directive kind."""

    def __init__(self, plane, token, host="127.0.0.1", port=36000, fail_start=False):
        self.plane = plane
        self.token = token
        self.host = host
        self.port = port
        self.fail_start = fail_start

    def poll_once(self) -> int:
        reply = self.plane.engine.heartbeat(self.token, {"agent_memory_mb": 50})
        for cmd in reply.commands:
            if cmd.kind.value == "SESSION_START":
                if self.fail_start:
                    self.plane.engine.report_result(
                        self.token,
                        cmd.command_id,
                        1,
                        "image pull failed",
                        detail={"error_code": "IMAGE_UNAVAILABLE"},
                    )
                else:
                    self.plane.engine.report_result(
                        self.token,
                        cmd.command_id,
                        0,
                        "session running",
                        detail={"access_url": f"http://{self.host}:{self.port}/"},
                    )
            elif cmd.kind.value == "SESSION_STOP":
                self.plane.engine.report_result(
                    self.token, cmd.command_id, 0, "session stopped"
                )
            else:
                self.plane.engine.report_result(self.token, cmd.command_id, 0, "")
        return len(reply.commands)


@pytest.fixture
def rig(plane, store, users):
    """Federated testbed with two nodes, testbed-level image, agents."""
    lab, tb, nodes = make_testbed(store, users, node_labels=("a", "b"))
    agents = {}
    for node in nodes:
        grant = enroll_node(plane, node.node_id)
        agents[node.node_id] = ScriptedAgent(plane, grant.agent_token)
    plane.sessions.bind_image(
        users["owner"].user_id, "testbed", tb.testbed_id, "registry/testbed:1"
    )
    return {
        "lab": lab,
        "testbed": tb,
        "nodes": nodes,
        "agents": agents,
        "users": users,
    }


def connect_ready(plane, rig, user_id, node_id):
    session = plane.sessions.connect(user_id, node_id)
    rig["agents"][node_id].poll_once()
    return plane.sessions.get_session(session.session_id)


class TestImageBindings:
    def test_testbed_fallback(self, plane, rig):
        binding = plane.sessions.resolve_image(rig["nodes"][0].node_id)
        assert binding.image_ref == "registry/testbed:1"

    def test_node_binding_wins(self, plane, rig):
        plane.sessions.bind_image(
            rig["users"]["owner"].user_id,
            "node",
            rig["nodes"][0].node_id,
            "registry/node:2",
        )
        assert plane.sessions.resolve_image(rig["nodes"][0].node_id).image_ref == (
            "registry/node:2"
        )
        assert plane.sessions.resolve_image(rig["nodes"][1].node_id).image_ref == (
            "registry/testbed:1"
        )

    def test_experimenter_forbidden(self, plane, rig):
        with pytest.raises(FedplaneError) as err:
            plane.sessions.bind_image(
                rig["users"]["experimenter"].user_id,
                "testbed",
                rig["testbed"].testbed_id,
                "registry/x:1",
            )
        assert err.value.code == "FORBIDDEN"

    def test_rebind_replaces(self, plane, rig):
        plane.sessions.bind_image(
            rig["users"]["owner"].user_id,
            "testbed",
            rig["testbed"].testbed_id,
            "registry/testbed:2",
        )
        assert plane.sessions.resolve_image(rig["nodes"][0].node_id).image_ref == (
            "registry/testbed:2"
        )


class TestConnect:
    def test_ready_with_url_and_latency(self, plane, rig):
        user = rig["users"]["experimenter"].user_id
        node_id = rig["nodes"][0].node_id
        session = connect_ready(plane, rig, user, node_id)
        assert session.state is SessionState.READY
        assert session.access_url == "http://127.0.0.1:36000/"
        assert session.access_latency_s is not None and session.access_latency_s > 0
        assert session.access_latency_s == session.ready_at - session.requested_at

    def test_requires_access(self, plane, rig):
        users = rig["users"]
        node_id = rig["nodes"][0].node_id
        # Someone else holds the slot right now.
        plane.scheduler.create_reservation(
            users["owner"].user_id, [node_id], plane.clock() - 10, plane.clock() + 3600
        )
        with pytest.raises(FedplaneError) as err:
            plane.sessions.connect(users["experimenter"].user_id, node_id)
        assert err.value.code == "NOT_AUTHORIZED"

    def test_offline_agent_rejected(self, plane, rig, clock):
        cfg = plane.config.engine
        clock.advance(cfg.offline_after_missed * cfg.heartbeat_interval_s + 1)
        with pytest.raises(FedplaneError) as err:
            plane.sessions.connect(
                rig["users"]["experimenter"].user_id, rig["nodes"][0].node_id
            )
        assert err.value.code == "NODE_OFFLINE"

    def test_no_image_binding(self, plane, store, users):
        _, _, nodes = make_testbed(
            store, users, lab_name="Bare", testbed_name="NoImage", node_labels=("x",)
        )
        enroll_node(plane, nodes[0].node_id)
        with pytest.raises(FedplaneError) as err:
            plane.sessions.connect(users["experimenter"].user_id, nodes[0].node_id)
        assert err.value.code == "NO_IMAGE_BINDING"

    def test_single_active_session_cap(self, plane, rig):
        user = rig["users"]["experimenter"].user_id
        node_id = rig["nodes"][0].node_id
        connect_ready(plane, rig, user, node_id)
        with pytest.raises(FedplaneError) as err:
            plane.sessions.connect(user, node_id)
        assert err.value.code == "CAPACITY"

    def test_agent_failure_propagates(self, plane, rig):
        user = rig["users"]["experimenter"].user_id
        node_id = rig["nodes"][0].node_id
        rig["agents"][node_id].fail_start = True
        session = plane.sessions.connect(user, node_id)
        rig["agents"][node_id].poll_once()
        failed = plane.sessions.get_session(session.session_id)
        assert failed.state is SessionState.FAILED
        assert failed.failure == "IMAGE_UNAVAILABLE"

    def test_deploy_timeout_sweep(self, plane, rig, clock):
        user = rig["users"]["experimenter"].user_id
        session = plane.sessions.connect(user, rig["nodes"][0].node_id)
        clock.advance(plane.config.sessions.deploy_timeout_s + 1)
        plane.sweep()
        timed_out = plane.sessions.get_session(session.session_id)
        assert timed_out.state is SessionState.FAILED
        assert timed_out.failure == "deploy timed out"
        # A late agent report must not resurrect the session.
        rig["agents"][rig["nodes"][0].node_id].poll_once()
        assert plane.sessions.get_session(session.session_id).state is (
            SessionState.FAILED
        )


class TestDisconnect:
    def test_owner_disconnect(self, plane, rig):
        user = rig["users"]["experimenter"].user_id
        node_id = rig["nodes"][0].node_id
        session = connect_ready(plane, rig, user, node_id)
        ended = plane.sessions.disconnect(session.session_id, user)
        assert ended.state is SessionState.ENDED
        assert ended.ended_at is not None
        # Stop directive drains on the next poll.
        assert rig["agents"][node_id].poll_once() == 1

    def test_idempotent(self, plane, rig):
        user = rig["users"]["experimenter"].user_id
        session = connect_ready(plane, rig, user, rig["nodes"][0].node_id)
        plane.sessions.disconnect(session.session_id, user)
        again = plane.sessions.disconnect(session.session_id, user)
        assert again.state is SessionState.ENDED

    def test_foreign_user_forbidden(self, plane, rig):
        user = rig["users"]["experimenter"].user_id
        session = connect_ready(plane, rig, user, rig["nodes"][0].node_id)
        with pytest.raises(FedplaneError) as err:
            plane.sessions.disconnect(session.session_id, rig["users"]["owner"].user_id)
        assert err.value.code == "FORBIDDEN"

    def test_unreachable_agent_still_ends_locally(self, plane, rig):
        user = rig["users"]["experimenter"].user_id
        node_id = rig["nodes"][0].node_id
        session = connect_ready(plane, rig, user, node_id)
        # Agent never polls again; session still ends and the stop directive
        # stays queued for whenever the node returns.
        ended = plane.sessions.disconnect(session.session_id, user)
        assert ended.state is SessionState.ENDED
        queued = plane.engine.list_commands(
            node_id=node_id, status=CommandStatus.QUEUED
        )
        assert any(c.kind.value == "SESSION_STOP" for c in queued)


class TestReservationTeardown:
    def test_cancel_tears_down_ready_session(self, plane, rig):
        user = rig["users"]["experimenter"].user_id
        node_id = rig["nodes"][0].node_id
        session = connect_ready(plane, rig, user, node_id)
        plane.scheduler.cancel_reservation(session.reservation_id, user)
        assert plane.sessions.get_session(session.session_id).state is (
            SessionState.ENDED
        )

    def test_expiry_grace_teardown(self, plane, rig, clock):
        user = rig["users"]["experimenter"].user_id
        node_id = rig["nodes"][0].node_id
        session = connect_ready(plane, rig, user, node_id)
        reservation = plane.scheduler.get_reservation(session.reservation_id)
        grace = plane.config.sessions.reservation_teardown_grace_s
        # Inside the grace window the session survives.
        clock.set(reservation.end_at + grace - 1)
        plane.sweep()
        assert plane.sessions.get_session(session.session_id).state is (
            SessionState.READY
        )
        clock.set(reservation.end_at + grace + 1)
        plane.sweep()
        assert plane.sessions.get_session(session.session_id).state is (
            SessionState.ENDED
        )
        assert plane.scheduler.get_reservation(session.reservation_id).status is (
            ReservationStatus.COMPLETED
        )


class TestLatencyStats:
    def test_arithmetic(self, plane, rig, clock):
        user = rig["users"]["experimenter"].user_id
        node_id = rig["nodes"][0].node_id
        for delay in (10.0, 12.0, 14.0):
            session = plane.sessions.connect(user, node_id)
            clock.advance(delay)
            rig["agents"][node_id].poll_once()
            plane.sessions.disconnect(session.session_id, user)
            rig["agents"][node_id].poll_once()
        stats = plane.sessions.latency_stats()
        assert stats.count == 3
        assert stats.average_s == pytest.approx(12.0, abs=1e-3)
        assert stats.maximum_s == pytest.approx(14.0, abs=1e-3)
        assert stats.minimum_s == pytest.approx(10.0, abs=1e-3)

    def test_empty_stats_absent(self, plane):
        assert plane.sessions.latency_stats() is None

    def test_csv_export(self, plane, rig, clock):
        user = rig["users"]["experimenter"].user_id
        node_id = rig["nodes"][0].node_id
        session = plane.sessions.connect(user, node_id)
        clock.advance(5.0)
        rig["agents"][node_id].poll_once()
        text = plane.sessions.latency_csv()
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == ["session_id", "node_id", "requested_at", "ready_at", "latency_s"]
        assert rows[1][0] == session.session_id
        assert rows[1][1] == node_id
        assert float(rows[1][4]) == pytest.approx(5.0, abs=1e-3)

    def test_filter_by_node(self, plane, rig, clock):
        user = rig["users"]["experimenter"].user_id
        a, b = (n.node_id for n in rig["nodes"])
        for node_id, delay in ((a, 2.0), (b, 8.0)):
            plane.sessions.connect(user, node_id)
            clock.advance(delay)
            rig["agents"][node_id].poll_once()
        assert plane.sessions.latency_stats(node_id=a).average_s == pytest.approx(2.0, abs=1e-3)
        assert plane.sessions.latency_stats(node_id=b).average_s == pytest.approx(8.0, abs=1e-3)
        both = plane.sessions.latency_stats(testbed_id=rig["testbed"].testbed_id)
        assert both.count == 2
