"""Per-control-interface agent: enrolls with a one-shot activation, polls
the control plane via heartbeats, executes run-commands, and supervises
session containers (or mock placeholders) on the host."""

from .runtime import AgentConfig, AgentRuntime, EnrollmentRejected  # noqa: F401
