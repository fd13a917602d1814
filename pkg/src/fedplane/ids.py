"""Sortable unique IDs and canonical namespace slugs.

IDs are 26-character Crockford base32 strings: a 48-bit millisecond
timestamp followed by 80 random bits, monotonic within one process so
insertion order and lexicographic order agree.
"""
from __future__ import annotations

import re
import secrets
import threading
import time

_CROCKFORD = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"

_lock = threading.Lock()
_last_ms = 0
_last_rand = 0


def new_id() -> str:
    """Return a fresh 26-char sortable ID."""
    global _last_ms, _last_rand
    with _lock:
        now_ms = time.time_ns() // 1_000_000
        if now_ms > _last_ms:
            _last_ms = now_ms
            _last_rand = secrets.randbits(80)
        else:
            # Same (or rewound) millisecond: bump the random part so IDs
            # issued by this process stay strictly increasing.
            _last_rand += 1
            if _last_rand >= 1 << 80:
                _last_ms += 1
                _last_rand = secrets.randbits(80)
        value = (_last_ms << 80) | _last_rand
    chars = []
    for _ in range(26):
        chars.append(_CROCKFORD[value & 0x1F])
        value >>= 5
    return "".join(reversed(chars))


_SLUG_RE = re.compile(r"[^a-z0-9]+")


def slugify(text: str) -> str:
    """Lowercase slug: alnum runs joined by single hyphens."""
    slug = _SLUG_RE.sub("-", text.lower()).strip("-")
    if not slug:
        raise ValueError(f"cannot derive a slug from {text!r}")
    return slug


def namespace_path(*segments: str) -> str:
    """Canonical slash-joined namespace from display names."""
    return "/".join(slugify(s) for s in segments)


def dedupe_namespace(base: str, taken) -> str:
    """First free namespace among base, base-2, base-3, ...

    `taken` is a membership test (set or callable container) of namespaces
    already in use.
    """
    if base not in taken:
        return base
    n = 2
    while f"{base}-{n}" in taken:
        n += 1
    return f"{base}-{n}"
