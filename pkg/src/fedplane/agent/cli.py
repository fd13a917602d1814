"""Agent command line.

    fedplane-agent enroll --server-url U --activation-id I --activation-code C [--state-dir D]
    fedplane-agent run --config PATH

Exit codes: 0 ok, 1 transient failure (network exhausted), 2 activation
rejected, 3 configuration error. Environment overrides use the
FEDPLANE_AGENT_ prefix.
"""
from __future__ import annotations

import argparse
import logging
import sys
import threading
from pathlib import Path

from ..errors import FedplaneError
from .runtime import AgentAuthError, AgentConfig, AgentRuntime, EnrollmentRejected
from .transport import TransportError

logger = logging.getLogger("fedplane.agent")

EXIT_OK = 0
EXIT_TRANSIENT = 1
EXIT_REJECTED = 2
EXIT_CONFIG = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedplane-agent")
    sub = parser.add_subparsers(dest="command", required=True)

    enroll = sub.add_parser("enroll", help="consume an activation and persist the grant")
    enroll.add_argument("--server-url")
    enroll.add_argument("--activation-id")
    enroll.add_argument("--activation-code")
    enroll.add_argument("--state-dir")
    enroll.add_argument("--config", help="existing key = value config to extend")

    run = sub.add_parser("run", help="heartbeat loop for an enrolled agent")
    run.add_argument("--config", required=True)
    return parser


def cmd_enroll(args) -> int:
    try:
        config = AgentConfig.load(
            args.config,
            server_url=args.server_url,
            activation_id=args.activation_id,
            activation_code=args.activation_code,
            state_dir=args.state_dir,
        )
        if not config.state_dir:
            config.state_dir = str(Path.home() / ".fedplane-agent")
        agent = AgentRuntime(config)
    except (FedplaneError, ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    config_path = args.config or str(Path(config.state_dir) / "config")
    try:
        node_id = agent.enroll(config_path=config_path)
    except EnrollmentRejected as exc:
        print(f"activation rejected: {exc}", file=sys.stderr)
        return EXIT_REJECTED
    except TransportError as exc:
        print(f"could not reach the control plane: {exc}", file=sys.stderr)
        return EXIT_TRANSIENT
    finally:
        agent.close()
    config.write(config_path)
    print(f"enrolled as node {node_id}; config written to {config_path}")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        config = AgentConfig.load(args.config)
        agent = AgentRuntime(config)
    except (FedplaneError, ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if agent.node_id is None:
        print("no grant found; run `fedplane-agent enroll` first", file=sys.stderr)
        return EXIT_CONFIG
    stop = threading.Event()
    try:
        agent.run_forever(stop)
    except AgentAuthError:
        print("agent token rejected by the control plane", file=sys.stderr)
        return EXIT_REJECTED
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        agent.close()
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "enroll":
        return cmd_enroll(args)
    return cmd_run(args)


if __name__ == "__main__":
    raise SystemExit(main())
