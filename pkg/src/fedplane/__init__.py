"""fedplane: self-hosted testbed federation plane.

Control-plane modules (context store, fleet engine, scheduler, session
orchestrator, artifact repos) share one SQLite-backed store and are served
through a single REST gateway; `fedplane.agent` is the per-control-interface
agent and `fedplane.harness` drives the whole pipeline at desk scale.
"""

__version__ = "0.1.0"
