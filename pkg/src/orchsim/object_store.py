"""Namespace-scoped shared blob store visible to every pod in a run.

Objects survive pod kills and node churn because the store is cluster-wide,
not node-scoped. Two backends sit behind one interface: an in-memory dict
(simulation default) and a filesystem tree (bucket = directory, key =
relative path, "/" allowed in keys). Etags are sha256 over content, so
equal bytes always hash to the same tag.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .errors import DuplicateName, NotFound, UnknownBucket, UnknownNamespace

ETAG_ALGORITHM = "sha256"
_BUCKET_META = ".bucket.json"


def etag_of(content: bytes) -> str:
    return hashlib.sha256(content).hexdigest()


@dataclass(frozen=True)
class StoredObject:
    namespace: str
    bucket: str
    key: str
    size_bytes: int
    etag: str
    created_tick: int


class _MemoryBackend:
    def __init__(self):
        self._blobs: dict[tuple[str, str, str], bytes] = {}

    def write(self, namespace: str, bucket: str, key: str, content: bytes) -> None:
        self._blobs[(namespace, bucket, key)] = content

    def read(self, namespace: str, bucket: str, key: str) -> bytes:
        return self._blobs[(namespace, bucket, key)]


class _FsBackend:
    def __init__(self, root: Path):
        self.root = Path(root)

    def _path(self, namespace: str, bucket: str, key: str) -> Path:
        return self.root / namespace / bucket / key

    def write(self, namespace: str, bucket: str, key: str, content: bytes) -> None:
        path = self._path(namespace, bucket, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(content)
        tmp.replace(path)  # atomic whole-object replacement

    def read(self, namespace: str, bucket: str, key: str) -> bytes:
        return self._path(namespace, bucket, key).read_bytes()


def _check_identifier(kind: str, name: str) -> None:
    if not name or "/" in name or name.startswith("."):
        raise ValueError(f"invalid {kind} name {name!r}")


class ObjectStore:
    """Shared blob store; put/get/list are safe under concurrent callers."""

    def __init__(
        self,
        clock: Callable[[], int] | None = None,
        root: Path | str | None = None,
        namespace_guard: Callable[[str], bool] | None = None,
    ):
        self._clock = clock or (lambda: 0)
        self._backend = _FsBackend(Path(root)) if root is not None else _MemoryBackend()
        self._guard = namespace_guard
        self._meta: dict[tuple[str, str], dict[str, StoredObject]] = {}
        self._lock = threading.Lock()

    def create_bucket(self, namespace: str, bucket: str) -> None:
        _check_identifier("bucket", bucket)
        if self._guard is not None and not self._guard(namespace):
            raise UnknownNamespace(f"namespace {namespace!r} does not exist")
        with self._lock:
            if (namespace, bucket) in self._meta:
                raise DuplicateName(f"bucket {namespace}/{bucket} already exists")
            self._meta[(namespace, bucket)] = {}

    def has_bucket(self, namespace: str, bucket: str) -> bool:
        return (namespace, bucket) in self._meta

    def buckets(self, namespace: str) -> list[str]:
        return sorted(b for (ns, b) in self._meta if ns == namespace)

    def _bucket(self, namespace: str, bucket: str) -> dict[str, StoredObject]:
        try:
            return self._meta[(namespace, bucket)]
        except KeyError:
            raise UnknownBucket(f"no bucket {bucket!r} in namespace {namespace!r}") from None

    def put(self, namespace: str, bucket: str, key: str, content: bytes) -> str:
        if not key or key.startswith("/") or ".." in key.split("/"):
            raise ValueError(f"invalid object key {key!r}")
        with self._lock:
            meta = self._bucket(namespace, bucket)
            self._backend.write(namespace, bucket, key, content)
            obj = StoredObject(
                namespace=namespace,
                bucket=bucket,
                key=key,
                size_bytes=len(content),
                etag=etag_of(content),
                created_tick=self._clock(),
            )
            meta[key] = obj
            return obj.etag

    def get(self, namespace: str, bucket: str, key: str) -> bytes:
        with self._lock:
            meta = self._bucket(namespace, bucket)
            if key not in meta:
                raise NotFound(f"no object {key!r} in {namespace}/{bucket}")
            return self._backend.read(namespace, bucket, key)

    def stat(self, namespace: str, bucket: str, key: str) -> StoredObject:
        with self._lock:
            meta = self._bucket(namespace, bucket)
            if key not in meta:
                raise NotFound(f"no object {key!r} in {namespace}/{bucket}")
            return meta[key]

    def list(self, namespace: str, bucket: str, prefix: str = "") -> list[str]:
        with self._lock:
            meta = self._bucket(namespace, bucket)
            return sorted(k for k in meta if k.startswith(prefix))

    def objects(self, namespace: str, bucket: str) -> list[StoredObject]:
        with self._lock:
            meta = self._bucket(namespace, bucket)
            return [meta[k] for k in sorted(meta)]

    # -- state export/import ------------------------------------------------

    def export_dir(self, path: Path | str) -> None:
        """Write every bucket as <path>/<ns>/<bucket>/<key> plus a meta sidecar."""
        root = Path(path)
        for (namespace, bucket) in sorted(self._meta):
            bucket_dir = root / namespace / bucket
            bucket_dir.mkdir(parents=True, exist_ok=True)
            sidecar = {}
            for key in self.list(namespace, bucket):
                obj = self.stat(namespace, bucket, key)
                target = bucket_dir / key
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(self.get(namespace, bucket, key))
                sidecar[key] = {
                    "etag": obj.etag,
                    "size_bytes": obj.size_bytes,
                    "created_tick": obj.created_tick,
                }
            (bucket_dir / _BUCKET_META).write_text(
                json.dumps(sidecar, sort_keys=True, indent=1)
            )

    def import_dir(self, path: Path | str) -> None:
        """Load buckets previously written by export_dir; overwrites keys."""
        root = Path(path)
        if not root.is_dir():
            return
        for meta_file in sorted(root.glob("*/*/" + _BUCKET_META)):
            bucket_dir = meta_file.parent
            namespace = bucket_dir.parent.name
            bucket = bucket_dir.name
            if not self.has_bucket(namespace, bucket):
                self.create_bucket(namespace, bucket)
            sidecar = json.loads(meta_file.read_text())
            for key, info in sorted(sidecar.items()):
                content = (bucket_dir / key).read_bytes()
                self.put(namespace, bucket, key, content)
                # preserve the original creation tick across the round trip
                obj = self._meta[(namespace, bucket)][key]
                self._meta[(namespace, bucket)][key] = StoredObject(
                    namespace=namespace,
                    bucket=bucket,
                    key=key,
                    size_bytes=obj.size_bytes,
                    etag=obj.etag,
                    created_tick=int(info.get("created_tick", 0)),
                )
