"""Append-only state journal for crash recovery.

One JSON object per line under the agent state dir; replaying the file
rebuilds local session state after a restart. Fsync is skipped on purpose:
losing the tail on power loss only costs a reconcile probe at startup.
"""
from __future__ import annotations

import json
import threading
import time
from pathlib import Path


class Journal:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, event: str, **fields) -> None:
        record = {"event": event, "at": time.time(), **fields}
        line = json.dumps(record, sort_keys=True)
        with self._lock:
            with self.path.open("a") as fh:
                fh.write(line + "\n")

    def replay(self) -> list[dict]:
        if not self.path.exists():
            return []
        records = []
        for line in self.path.read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                continue  # torn tail write; ignore
        return records
