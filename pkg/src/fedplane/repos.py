"""Code and dataset repositories: namespaced, content-addressed artifact
storage with descriptors that tie uploads back to nodes and testbeds.

Blobs live under a root directory keyed by SHA-256 with a two-level
fan-out (ab/cd/abcd...); identical bytes are stored once. Writes go to a
temp file and rename into place, so concurrent uploads of the same blob
are safe.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

from .config import RepoConfig
from .errors import FedplaneError
from .ids import new_id
from .store import Relation, Store


class ArtifactKind(str, Enum):
    CODE = "CODE"
    DATASET = "DATASET"


@dataclass
class ArtifactEntry:
    artifact_id: str
    kind: ArtifactKind
    namespace: str
    filename: str
    size_bytes: int
    checksum: str
    descriptors: dict = field(default_factory=dict)
    uploaded_by: str = ""
    uploaded_at: float = 0.0


class ArtifactRepository:
    def __init__(self, store: Store, blob_root: str | Path, config: Optional[RepoConfig] = None):
        self.store = store
        self.blob_root = Path(blob_root)
        self.blob_root.mkdir(parents=True, exist_ok=True)
        self.config = config or RepoConfig()
        self.clock = store.clock

    def _blob_path(self, checksum: str) -> Path:
        return self.blob_root / checksum[:2] / checksum[2:4] / checksum

    def _write_blob(self, checksum: str, data: bytes) -> None:
        path = self._blob_path(checksum)
        if path.exists():
            return  # dedupe: identical bytes already stored
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".upload-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def upload_artifact(
        self,
        user_id: str,
        kind: ArtifactKind,
        namespace: str,
        filename: str,
        data: bytes,
        descriptors: Optional[dict] = None,
        claimed_sha256: Optional[str] = None,
    ) -> ArtifactEntry:
        """Store bytes content-addressed and link the entry to the context
        its namespace resolves to."""
        if len(data) > self.config.max_artifact_bytes:
            raise FedplaneError(
                "TOO_LARGE",
                f"artifact exceeds {self.config.max_artifact_bytes} bytes",
            )
        checksum = hashlib.sha256(data).hexdigest()
        if claimed_sha256 and claimed_sha256.lower() != checksum:
            raise FedplaneError(
                "CHECKSUM_MISMATCH", "client-supplied hash does not match the bytes"
            )
        resolved = self.store.resolve_namespace(namespace)
        if resolved is None:
            raise FedplaneError(
                "NO_NAMESPACE", f"namespace {namespace!r} does not resolve"
            )
        descriptors = dict(descriptors or {})
        with self.store.write() as conn:
            self.store.get_user(user_id)
            self._check_descriptor_refs(descriptors)
            entry = ArtifactEntry(
                artifact_id=new_id(),
                kind=ArtifactKind(kind),
                namespace=namespace,
                filename=filename,
                size_bytes=len(data),
                checksum=checksum,
                descriptors=descriptors,
                uploaded_by=user_id,
                uploaded_at=self.clock(),
            )
            conn.execute(
                "INSERT INTO artifacts (artifact_id, kind, namespace, filename, size_bytes, "
                "checksum, descriptors, uploaded_by, uploaded_at) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (
                    entry.artifact_id,
                    entry.kind.value,
                    namespace,
                    filename,
                    entry.size_bytes,
                    checksum,
                    json.dumps(descriptors),
                    user_id,
                    entry.uploaded_at,
                ),
            )
            kind_name, target = resolved
            if kind_name == "node":
                self.store._add_edge(
                    conn, entry.artifact_id, target.node_id, Relation.ARTIFACT_FOR_NODE
                )
            if descriptors.get("node"):
                self.store._add_edge(
                    conn,
                    entry.artifact_id,
                    descriptors["node"],
                    Relation.ARTIFACT_FOR_NODE,
                )
            self._write_blob(checksum, data)
        return entry

    def _check_descriptor_refs(self, descriptors: dict) -> None:
        if descriptors.get("node"):
            self.store.get_node(descriptors["node"])
        if descriptors.get("testbed"):
            self.store.get_testbed(descriptors["testbed"])

    def list_artifacts(
        self,
        namespace: Optional[str] = None,
        kind: Optional[ArtifactKind] = None,
        node_id: Optional[str] = None,
        include_deleted: bool = False,
    ) -> list:
        """Entries in (uploaded_at, id) order. `node_id` matches entries whose
        namespace belongs to the node or whose descriptors name it."""
        sql, args = "SELECT * FROM artifacts WHERE 1=1", []
        if not include_deleted:
            sql += " AND deleted_at IS NULL"
        if namespace:
            sql += " AND (namespace = ? OR namespace LIKE ?)"
            args.extend([namespace, namespace + "/%"])
        if kind:
            sql += " AND kind = ?"
            args.append(ArtifactKind(kind).value)
        rows = self.store.read().execute(
            sql + " ORDER BY uploaded_at, artifact_id", args
        ).fetchall()
        entries = [self._row_to_entry(r) for r in rows]
        if node_id:
            node = self.store.get_node(node_id)
            entries = [
                e
                for e in entries
                if e.descriptors.get("node") == node_id
                or (node.namespace and e.namespace == node.namespace)
            ]
        return entries

    def fetch_artifact(self, artifact_id: str) -> tuple[bytes, ArtifactEntry]:
        """Return the stored bytes after re-verifying their checksum, so disk
        corruption surfaces as an error instead of silent bad data."""
        row = self.store.read().execute(
            "SELECT * FROM artifacts WHERE artifact_id = ?", (artifact_id,)
        ).fetchone()
        if row is None:
            raise FedplaneError("NOT_FOUND", f"artifact {artifact_id} not found")
        entry = self._row_to_entry(row)
        path = self._blob_path(entry.checksum)
        if not path.exists():
            raise FedplaneError("CORRUPT", f"blob for {artifact_id} is missing")
        data = path.read_bytes()
        if hashlib.sha256(data).hexdigest() != entry.checksum:
            raise FedplaneError(
                "CORRUPT", f"blob for {artifact_id} fails checksum verification"
            )
        return data, entry

    def blob_bytes_on_disk(self) -> int:
        return sum(p.stat().st_size for p in self.blob_root.rglob("*") if p.is_file())

    def _row_to_entry(self, row) -> ArtifactEntry:
        return ArtifactEntry(
            artifact_id=row["artifact_id"],
            kind=ArtifactKind(row["kind"]),
            namespace=row["namespace"],
            filename=row["filename"],
            size_bytes=row["size_bytes"],
            checksum=row["checksum"],
            descriptors=json.loads(row["descriptors"]),
            uploaded_by=row["uploaded_by"],
            uploaded_at=row["uploaded_at"],
        )
