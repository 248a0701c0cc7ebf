"""Domain types, content digests and the canonical JSON form used for signing.

Canonical form: UTF-8 JSON, object keys sorted by code point, separators
``,`` and ``:`` with no whitespace, non-ASCII characters emitted verbatim.
Integers render in plain decimal. Finite floats render with Python's
shortest round-trip ``repr`` (for example ``0.1``, ``1e-07``, ``2.0``), which
makes ``serialize(parse(serialize(x))) == serialize(x)``. Values that end
up inside signed documents are kept as integers or decimal strings wherever
possible so other implementations never have to reproduce float rendering.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import PurePosixPath
from typing import Any

from .errors import NonCanonicalizable, ValidationFailed

SHA256 = "sha256"
_HEX_RE = re.compile(r"^[0-9a-f]{64}$")
FRAMEWORK_TAG = "reftrainer/1"


# ---------------------------------------------------------------------------
# time helpers


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def format_ts(dt: datetime) -> str:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def parse_ts(value: str) -> datetime:
    return datetime.strptime(value, "%Y-%m-%dT%H:%M:%S.%fZ").replace(tzinfo=timezone.utc)


def _opt_ts(value: str | None) -> datetime | None:
    return parse_ts(value) if value is not None else None


def _opt_fmt(dt: datetime | None) -> str | None:
    return format_ts(dt) if dt is not None else None


# ---------------------------------------------------------------------------
# canonical JSON


def _check_str(value: str, path: str) -> None:
    try:
        value.encode("utf-8")
    except UnicodeEncodeError:
        raise NonCanonicalizable(f"string with lone surrogate at {path or '$'}") from None


def _check(value: Any, path: str) -> None:
    if isinstance(value, str):
        _check_str(value, path)
        return
    if value is None or isinstance(value, (bool, int)):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise NonCanonicalizable(f"non-finite number at {path or '$'}")
        return
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise NonCanonicalizable(f"non-string key {k!r} at {path or '$'}")
            _check_str(k, path)
            _check(v, f"{path}.{k}")
        return
    if isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _check(v, f"{path}[{i}]")
        return
    raise NonCanonicalizable(f"unsupported type {type(value).__name__} at {path or '$'}")


def canonical_serialize(document: Any) -> bytes:
    """Serialize *document* to its canonical byte form."""
    _check(document, "")
    return json.dumps(
        document,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def _reject_constant(name: str) -> Any:
    raise NonCanonicalizable(f"non-finite literal {name}")


def canonical_parse(data: bytes | str) -> Any:
    """Parse JSON text, refusing NaN/Infinity literals."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    return json.loads(data, parse_constant=_reject_constant)


def is_canonical(data: bytes) -> bool:
    try:
        return canonical_serialize(canonical_parse(data)) == data
    except (ValueError, NonCanonicalizable):
        return False


# ---------------------------------------------------------------------------
# digests


@dataclass(frozen=True)
class Digest:
    hex: str
    algorithm: str = SHA256

    def __post_init__(self) -> None:
        if self.algorithm != SHA256:
            raise ValueError(f"unsupported digest algorithm {self.algorithm!r}")
        if not isinstance(self.hex, str) or not _HEX_RE.match(self.hex):
            raise ValueError(f"malformed sha256 hex {self.hex!r}")

    def to_dict(self) -> dict[str, str]:
        return {"algorithm": self.algorithm, "hex": self.hex}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Digest:
        return cls(hex=d["hex"], algorithm=d.get("algorithm", SHA256))

    def __str__(self) -> str:
        return f"{self.algorithm}:{self.hex}"


def compute_digest(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).hexdigest())


def is_valid_hex(value: Any) -> bool:
    return isinstance(value, str) and bool(_HEX_RE.match(value))


# ---------------------------------------------------------------------------
# artifact references


def normalize_name(name: str) -> str:
    """Validate a relative, slash-separated artifact path and return it.

    Raises ValueError for empty names, absolute paths, backslashes and
    ``.``/``..``/empty segments.
    """
    if not isinstance(name, str) or not name:
        raise ValueError("artifact name must be a non-empty string")
    if name.startswith("/") or "\\" in name or "\x00" in name:
        raise ValueError(f"artifact name {name!r} is not a relative path")
    parts = name.split("/")
    if any(p in ("", ".", "..") for p in parts):
        raise ValueError(f"artifact name {name!r} is not normalized")
    return str(PurePosixPath(*parts))


@dataclass(frozen=True)
class ArtifactRef:
    name: str
    digest: Digest
    size_bytes: int
    media_type: str = "application/octet-stream"

    def __post_init__(self) -> None:
        normalize_name(self.name)
        if self.size_bytes < 0:
            raise ValueError("size_bytes must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "digest": self.digest.to_dict(),
            "size_bytes": self.size_bytes,
            "media_type": self.media_type,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ArtifactRef:
        return cls(
            name=d["name"],
            digest=Digest.from_dict(d["digest"]),
            size_bytes=int(d["size_bytes"]),
            media_type=d.get("media_type", "application/octet-stream"),
        )


# ---------------------------------------------------------------------------
# jobs


class Task(str, enum.Enum):
    REGRESSION = "regression"
    CLASSIFICATION = "classification"


class JobState(str, enum.Enum):
    SUBMITTED = "SUBMITTED"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


ALLOWED_TRANSITIONS: dict[JobState, frozenset[JobState]] = {
    JobState.SUBMITTED: frozenset({JobState.RUNNING}),
    JobState.RUNNING: frozenset({JobState.COMPLETED, JobState.FAILED}),
    JobState.COMPLETED: frozenset(),
    JobState.FAILED: frozenset(),
}

_U64 = 2**64


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    task: Task = Task.REGRESSION
    seed: int = 0
    framework_tag: str = FRAMEWORK_TAG

    def violations(self) -> list[tuple[str, str]]:
        out = []
        if isinstance(self.epochs, bool) or not isinstance(self.epochs, int) or self.epochs < 0:
            out.append(("epochs", "must be a non-negative integer"))
        if isinstance(self.batch_size, bool) or not isinstance(self.batch_size, int) or self.batch_size < 1:
            out.append(("batch_size", "must be an integer >= 1"))
        lr = self.learning_rate
        if isinstance(lr, bool) or not isinstance(lr, (int, float)) or not math.isfinite(lr) or lr <= 0:
            out.append(("learning_rate", "must be a finite number > 0"))
        if not isinstance(self.seed, int) or not 0 <= self.seed < _U64:
            out.append(("seed", "must be a 64-bit unsigned integer"))
        try:
            Task(self.task)
        except ValueError:
            out.append(("task", "must be 'regression' or 'classification'"))
        if self.framework_tag != FRAMEWORK_TAG:
            out.append(("framework_tag", f"only {FRAMEWORK_TAG!r} is available"))
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            field_name, reason = problems[0]
            raise ValidationFailed(field_name, reason)

    def to_dict(self) -> dict[str, Any]:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": float(self.learning_rate),
            "task": Task(self.task).value,
            "seed": self.seed,
            "framework_tag": self.framework_tag,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainingConfig:
        return cls(
            epochs=d["epochs"],
            batch_size=d["batch_size"],
            learning_rate=d["learning_rate"],
            task=Task(d.get("task", "regression")),
            seed=d.get("seed", 0),
            framework_tag=d.get("framework_tag", FRAMEWORK_TAG),
        )


@dataclass(frozen=True)
class JobSpec:
    dataset: ArtifactRef
    config: TrainingConfig
    submitter: str
    base_model: ArtifactRef | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset.to_dict(),
            "base_model": self.base_model.to_dict() if self.base_model else None,
            "config": self.config.to_dict(),
            "submitter": self.submitter,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> JobSpec:
        return cls(
            dataset=ArtifactRef.from_dict(d["dataset"]),
            base_model=ArtifactRef.from_dict(d["base_model"]) if d.get("base_model") else None,
            config=TrainingConfig.from_dict(d["config"]),
            submitter=d["submitter"],
        )


@dataclass(frozen=True)
class TrainingMetrics:
    final_loss: float | None
    loss_per_epoch: tuple[float, ...]
    duration_seconds: float
    aibom_generation_seconds: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "final_loss": self.final_loss,
            "loss_per_epoch": list(self.loss_per_epoch),
            "duration_seconds": self.duration_seconds,
            "aibom_generation_seconds": self.aibom_generation_seconds,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainingMetrics:
        return cls(
            final_loss=d.get("final_loss"),
            loss_per_epoch=tuple(d.get("loss_per_epoch", ())),
            duration_seconds=d["duration_seconds"],
            aibom_generation_seconds=d.get("aibom_generation_seconds", 0.0),
        )


@dataclass(frozen=True)
class JobRecord:
    job_id: str
    spec: JobSpec
    state: JobState
    created_at: datetime
    started_at: datetime | None = None
    finished_at: datetime | None = None
    outputs: tuple[ArtifactRef, ...] = ()
    failure_reason: str | None = None
    attempt: int = 0
    metrics: TrainingMetrics | None = None

    def output(self, name: str) -> ArtifactRef | None:
        for ref in self.outputs:
            if ref.name == name:
                return ref
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "job_id": self.job_id,
            "spec": self.spec.to_dict(),
            "state": self.state.value,
            "created_at": format_ts(self.created_at),
            "started_at": _opt_fmt(self.started_at),
            "finished_at": _opt_fmt(self.finished_at),
            "outputs": [o.to_dict() for o in self.outputs],
            "failure_reason": self.failure_reason,
            "attempt": self.attempt,
            "metrics": self.metrics.to_dict() if self.metrics else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> JobRecord:
        return cls(
            job_id=d["job_id"],
            spec=JobSpec.from_dict(d["spec"]),
            state=JobState(d["state"]),
            created_at=parse_ts(d["created_at"]),
            started_at=_opt_ts(d.get("started_at")),
            finished_at=_opt_ts(d.get("finished_at")),
            outputs=tuple(ArtifactRef.from_dict(o) for o in d.get("outputs", ())),
            failure_reason=d.get("failure_reason"),
            attempt=d.get("attempt", 0),
            metrics=TrainingMetrics.from_dict(d["metrics"]) if d.get("metrics") else None,
        )


def new_job_id() -> str:
    return str(uuid.uuid4())


@dataclass(frozen=True)
class EnvironmentSnapshot:
    worker_image_digest: Digest
    platform_version: str
    hostname: str
    cpu_model: str
    total_memory_bytes: int
    wall_clock_start: datetime
    wall_clock_end: datetime
    scanner_report_ref: ArtifactRef | None = None

    def __post_init__(self) -> None:
        if self.wall_clock_end < self.wall_clock_start:
            raise ValueError("wall_clock_end precedes wall_clock_start")

    def to_dict(self) -> dict[str, Any]:
        return {
            "worker_image_digest": self.worker_image_digest.to_dict(),
            "platform_version": self.platform_version,
            "hostname": self.hostname,
            "cpu_model": self.cpu_model,
            "total_memory_bytes": self.total_memory_bytes,
            "wall_clock_start": format_ts(self.wall_clock_start),
            "wall_clock_end": format_ts(self.wall_clock_end),
            "scanner_report_ref": self.scanner_report_ref.to_dict() if self.scanner_report_ref else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EnvironmentSnapshot:
        ref = d.get("scanner_report_ref")
        return cls(
            worker_image_digest=Digest.from_dict(d["worker_image_digest"]),
            platform_version=d["platform_version"],
            hostname=d["hostname"],
            cpu_model=d["cpu_model"],
            total_memory_bytes=int(d["total_memory_bytes"]),
            wall_clock_start=parse_ts(d["wall_clock_start"]),
            wall_clock_end=parse_ts(d["wall_clock_end"]),
            scanner_report_ref=ArtifactRef.from_dict(ref) if ref else None,
        )


def decimal_string(value: float, places: int = 6) -> str:
    """Fixed-point rendering used for floats that go into signed payloads."""
    if not math.isfinite(value):
        raise NonCanonicalizable(f"non-finite value {value!r}")
    text = f"{value:.{places}f}"
    return "0." + "0" * places if text == "-0." + "0" * places else text


__all__ = [
    "ALLOWED_TRANSITIONS",
    "ArtifactRef",
    "Digest",
    "EnvironmentSnapshot",
    "JobRecord",
    "JobSpec",
    "JobState",
    "Task",
    "TrainingConfig",
    "TrainingMetrics",
    "canonical_parse",
    "canonical_serialize",
    "compute_digest",
    "decimal_string",
    "format_ts",
    "is_canonical",
    "normalize_name",
    "parse_ts",
    "utcnow",
]
