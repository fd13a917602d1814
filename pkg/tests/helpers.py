"""Non-fixture test helpers."""
from __future__ import annotations

import socket

from fedplane.store import (
    ControlMode,
    DeviceDescriptor,
    LabRecord,
    NodeRecord,
    TestbedRecord,
)


def make_testbed(
    store,
    users,
    *,
    lab_name="WINGS Lab",
    testbed_name="NeXT",
    node_labels=("node-01",),
):
    """Registry helper: one lab, one testbed, N registered nodes."""
    lab = store.put_entity(LabRecord(name=lab_name, owner_user_id=users["owner"].user_id))
    tb = store.put_entity(
        TestbedRecord(
            lab_id=lab.lab_id, public_name=testbed_name, description="5G+ testbed"
        )
    )
    nodes = [
        store.put_entity(
            NodeRecord(
                testbed_id=tb.testbed_id,
                public_identifier=label,
                control_mode=ControlMode.CENTRALIZED,
                device_descriptors=[DeviceDescriptor(kind="SDR", model="USRP X310")],
            )
        )
        for label in node_labels
    ]
    return lab, tb, nodes


def enroll_node(plane, node_id):
    """Issue + consume an activation; returns the grant."""
    plane.engine.issue_activation(node_id)
    activation = plane.store.read().execute(
        "SELECT * FROM activations WHERE node_id = ? AND consumed = 0 AND revoked = 0",
        (node_id,),
    ).fetchone()
    return plane.engine.enroll(
        activation["activation_id"], activation["activation_code"], agent_version="test"
    )


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]
