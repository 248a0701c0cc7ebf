"""Write-once, content-verified object store on the local filesystem.

Layout under the storage root::

    objects/<namespace>/<name>     object bytes
    index/<namespace>.json         name -> {digest, size_bytes, media_type}
    owners/<namespace>             owning principal

Every object write and index update goes through write-temp-then-rename
while holding the store lock, so readers see either the old or the new
state. Reads recompute the digest and refuse corrupted bytes.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import os
import re
import secrets
import shutil
import tempfile
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable
from urllib.parse import quote

from filelock import FileLock

from .core import ArtifactRef, Digest, compute_digest, normalize_name
from .errors import (
    GrantExpired,
    ImmutabilityViolation,
    IntegrityError,
    InvalidToken,
    NotFound,
    NotOwner,
    StorageFull,
)

_NAMESPACE_RE = re.compile(r"^[A-Za-z0-9_-][A-Za-z0-9._-]{0,127}$")


def check_namespace(namespace: str) -> str:
    if not isinstance(namespace, str) or not _NAMESPACE_RE.match(namespace):
        raise ValueError(f"invalid namespace {namespace!r}")
    return namespace


@dataclass(frozen=True)
class ObjectKey:
    job_id: str  # namespace: a job id, "uploads.<subject>" or "scans"
    name: str

    def __post_init__(self) -> None:
        check_namespace(self.job_id)
        normalize_name(self.name)

    def __str__(self) -> str:
        return f"{self.job_id}/{self.name}"


@dataclass(frozen=True)
class AccessGrant:
    key: ObjectKey
    expires: int  # unix seconds
    token: str

    @property
    def expires_at(self) -> datetime:
        return datetime.fromtimestamp(self.expires, tz=timezone.utc)

    def url(self, base: str = "") -> str:
        return (
            f"{base}/v1/objects/{quote(self.key.job_id)}/{quote(self.key.name)}"
            f"?expires={self.expires}&token={self.token}"
        )


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


class ObjectStore:
    def __init__(
        self,
        root: str | os.PathLike[str],
        grant_secret: bytes | None = None,
        *,
        capacity_bytes: int | None = None,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        for sub in ("objects", "index", "owners"):
            (self.root / sub).mkdir(exist_ok=True)
        self._secret = grant_secret if grant_secret is not None else self._load_secret()
        self.capacity_bytes = capacity_bytes
        self.clock = clock
        self._lock = threading.RLock()
        self._flock = FileLock(str(self.root / ".lock"))

    def _load_secret(self) -> bytes:
        path = self.root / "grant.secret"
        if not path.exists():
            _atomic_write(path, secrets.token_bytes(32))
            os.chmod(path, 0o600)
        return path.read_bytes()

    # -- paths ---------------------------------------------------------------

    def object_path(self, key: ObjectKey) -> Path:
        return self.root / "objects" / key.job_id / key.name

    def _index_path(self, namespace: str) -> Path:
        return self.root / "index" / f"{namespace}.json"

    def _read_index(self, namespace: str) -> dict[str, dict]:
        path = self._index_path(namespace)
        if not path.exists():
            return {}
        return json.loads(path.read_text("utf-8"))

    def _used_bytes(self) -> int:
        total = 0
        for idx in (self.root / "index").glob("*.json"):
            total += sum(e["size_bytes"] for e in json.loads(idx.read_text("utf-8")).values())
        return total

    # -- objects -------------------------------------------------------------

    def put_object(self, key: ObjectKey, data: bytes, media_type: str = "application/octet-stream") -> ArtifactRef:
        digest = compute_digest(data)
        with self._lock, self._flock:
            index = self._read_index(key.job_id)
            existing = index.get(key.name)
            if existing is not None:
                if existing["digest"] != digest.hex:
                    raise ImmutabilityViolation(f"{key} already holds different bytes")
                return self._ref(key.name, existing)
            if self.capacity_bytes is not None and self._used_bytes() + len(data) > self.capacity_bytes:
                raise StorageFull(f"storing {len(data)} bytes exceeds capacity")
            if shutil.disk_usage(self.root).free < len(data):
                raise StorageFull("filesystem is full")
            _atomic_write(self.object_path(key), data)
            index[key.name] = {"digest": digest.hex, "size_bytes": len(data), "media_type": media_type}
            _atomic_write(
                self._index_path(key.job_id),
                json.dumps(index, sort_keys=True, separators=(",", ":")).encode("utf-8"),
            )
            return self._ref(key.name, index[key.name])

    @staticmethod
    def _ref(name: str, entry: dict) -> ArtifactRef:
        return ArtifactRef(
            name=name,
            digest=Digest(entry["digest"]),
            size_bytes=entry["size_bytes"],
            media_type=entry.get("media_type", "application/octet-stream"),
        )

    def stat(self, key: ObjectKey) -> ArtifactRef:
        entry = self._read_index(key.job_id).get(key.name)
        if entry is None:
            raise NotFound(str(key))
        return self._ref(key.name, entry)

    def exists(self, key: ObjectKey) -> bool:
        return key.name in self._read_index(key.job_id)

    def list_objects(self, namespace: str) -> list[ArtifactRef]:
        check_namespace(namespace)
        return [self._ref(n, e) for n, e in sorted(self._read_index(namespace).items())]

    def read_raw(self, key: ObjectKey) -> bytes:
        """Stored bytes without the integrity check (for verifiers reporting actual digests)."""
        if not self.exists(key):
            raise NotFound(str(key))
        try:
            return self.object_path(key).read_bytes()
        except FileNotFoundError as exc:
            raise NotFound(str(key)) from exc

    def get_object(self, key: ObjectKey) -> bytes:
        ref = self.stat(key)
        data = self.read_raw(key)
        actual = compute_digest(data)
        if actual.hex != ref.digest.hex:
            raise IntegrityError(f"{key}: recorded {ref.digest.hex} but stored bytes hash to {actual.hex}")
        return data

    # -- ownership -----------------------------------------------------------

    def set_owner(self, namespace: str, principal: str) -> None:
        check_namespace(namespace)
        path = self.root / "owners" / namespace
        with self._lock, self._flock:
            if path.exists():
                current = path.read_text("utf-8")
                if current != principal:
                    raise NotOwner(f"namespace {namespace} belongs to another principal")
                return
            _atomic_write(path, principal.encode("utf-8"))

    def owner(self, namespace: str) -> str | None:
        path = self.root / "owners" / check_namespace(namespace)
        return path.read_text("utf-8") if path.exists() else None

    # -- grants --------------------------------------------------------------

    def _mac(self, key: ObjectKey, expires: int) -> str:
        msg = f"{key.job_id}\n{key.name}\n{expires}".encode("utf-8")
        tag = hmac.new(self._secret, msg, hashlib.sha256).digest()
        return base64.urlsafe_b64encode(tag).rstrip(b"=").decode("ascii")

    def issue_grant(self, key: ObjectKey, ttl_seconds: int, principal: str) -> AccessGrant:
        if isinstance(ttl_seconds, bool) or not isinstance(ttl_seconds, int) or ttl_seconds <= 0:
            raise ValueError("ttl_seconds must be a positive integer")
        if self.owner(key.job_id) != principal:
            raise NotOwner(f"{principal!r} does not own {key.job_id}")
        if not self.exists(key):
            raise NotFound(str(key))
        expires = int(self.clock()) + ttl_seconds
        return AccessGrant(key=key, expires=expires, token=self._mac(key, expires))

    def check_grant(self, grant: AccessGrant) -> None:
        expected = self._mac(grant.key, grant.expires)
        if not isinstance(grant.token, str) or not hmac.compare_digest(
            expected.encode("ascii"), grant.token.encode("utf-8", "surrogatepass")
        ):
            raise InvalidToken("grant token does not authenticate this object and expiry")
        if self.clock() > grant.expires:
            raise GrantExpired(f"grant expired at {grant.expires_at.isoformat()}")

    def redeem_grant(self, grant: AccessGrant) -> bytes:
        self.check_grant(grant)
        return self.get_object(grant.key)
