"""Error type shared across all control-plane modules.

Every refusable operation raises FedplaneError with a stable machine code.
The gateway maps codes to HTTP statuses and an error envelope
{code, message, details[]}; callers embedding the modules directly can
match on `code`.
"""
from __future__ import annotations

from typing import Optional, Sequence


class FedplaneError(Exception):
    """Operation rejected with a stable machine-readable code.

    `audit_detail` carries internal context (for example which of the
    enrollment failure modes actually happened) that must reach the audit
    log but never the response body.
    """

    def __init__(
        self,
        code: str,
        message: str,
        details: Optional[Sequence[str]] = None,
        audit_detail: Optional[str] = None,
    ):
        super().__init__(message)
        self.code = code
        self.message = message
        self.details = list(details or [])
        self.audit_detail = audit_detail

    def to_envelope(self) -> dict:
        return {"code": self.code, "message": self.message, "details": self.details}


# HTTP status per error code; anything unlisted maps to 400.
HTTP_STATUS = {
    "NOT_FOUND": 404,
    "UNKNOWN_COMMAND": 404,
    "NO_NAMESPACE": 404,
    "UNAUTHORIZED": 401,
    "INVALID_CREDENTIALS": 401,
    "FORBIDDEN": 403,
    "REJECTED": 403,
    "DUPLICATE": 409,
    "CONFLICT": 409,
    "ALREADY_TERMINAL": 409,
    "ILLEGAL_TRANSITION": 409,
    "ILLEGAL_STATE": 409,
    "CAPACITY": 409,
    "PORT_CONFLICT": 409,
    "TOO_LARGE": 413,
    "VALIDATION": 422,
    "BAD_INTERVAL": 422,
    "BAD_FORMAT": 422,
    "TOO_LONG": 422,
    "DANGLING_REF": 422,
    "CHECKSUM_MISMATCH": 422,
    "NODE_OFFLINE": 409,
    "NODE_NOT_FEDERATED": 409,
    "NO_ACTIVATION": 409,
    "EXPIRED": 409,
    "NO_IMAGE_BINDING": 409,
    "DEPLOY_FAILED": 502,
    "NOT_AUTHORIZED": 403,
    "IMAGE_UNAVAILABLE": 502,
    "CORRUPT": 500,
    "SCENARIO_FAILED": 500,
}


def http_status_for(code: str) -> int:
    return HTTP_STATUS.get(code, 400)
