"""Control-plane server entry point.

    fedplane-server --listen 0.0.0.0:8080 --db-path fedplane.db [--config FILE]

Config file keys and FEDPLANE_* environment overrides are described in the
README; flags win over both.
"""
from __future__ import annotations

import argparse
import logging
import secrets
import threading
import time

from .config import PlaneConfig
from .gateway import bootstrap_admin, create_app
from .plane import ControlPlane

logger = logging.getLogger("fedplane.server")

DEFAULT_SERVER_URL = "http://127.0.0.1:8080"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedplane-server")
    parser.add_argument("--listen", help="ADDR:PORT to bind (default 127.0.0.1:8080)")
    parser.add_argument("--db-path", help="path of the SQLite context store")
    parser.add_argument("--config", help="key = value config file")
    return parser


def start_sweeper(plane: ControlPlane, interval_s: float) -> threading.Event:
    """Background maintenance loop; returns the stop event."""
    stop = threading.Event()

    def loop() -> None:
        while not stop.wait(interval_s):
            try:
                plane.sweep()
            except Exception:
                logger.exception("sweep pass failed")

    threading.Thread(target=loop, name="fedplane-sweeper", daemon=True).start()
    return stop


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    config = PlaneConfig.load(args.config)
    if args.listen:
        config.listen = args.listen
    if args.db_path:
        config.db_path = args.db_path
    host, _, port = config.listen.rpartition(":")
    if not config.gateway.server_url or config.gateway.server_url == DEFAULT_SERVER_URL:
        config.gateway.server_url = f"http://{host or '127.0.0.1'}:{port}"

    plane = ControlPlane(config, clock=time.time)
    plane.recover()
    password = config.gateway.bootstrap_admin_password
    generated = False
    if not password:
        password = secrets.token_urlsafe(12)
        generated = True
    created = bootstrap_admin(plane, config.gateway.bootstrap_admin_username, password)
    if created is not None:
        if generated:
            logger.warning(
                "bootstrap admin %r created with generated password: %s "
                "(set FEDPLANE_GATEWAY_BOOTSTRAP_ADMIN_PASSWORD to control it)",
                created.username,
                password,
            )
        else:
            logger.info("bootstrap admin %r created", created.username)

    start_sweeper(plane, config.sweep_interval_s)
    app = create_app(plane)

    import uvicorn

    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8080), log_level="info")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
