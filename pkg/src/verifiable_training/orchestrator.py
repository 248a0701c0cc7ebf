"""Job queue with worker leases and at-least-once delivery.

State lives in memory and, when ``state_dir`` is given, is written through
as canonical JSON documents::

    state/jobs/<job_id>.json     JobRecord
    state/queue/<job_id>.json    QueueEntry (present while the job is queued or leased)

Every public operation runs under one lock, so each is a single transaction
with respect to the others. The on-disk state is reloaded on construction;
the store assumes a single orchestrator process owns ``state_dir``.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import threading
import uuid
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Iterable

from .attestation import METRICS_NAME, MODEL_NAME, aibom_name, link_name
from .core import (
    ALLOWED_TRANSITIONS,
    ArtifactRef,
    JobRecord,
    JobSpec,
    JobState,
    TrainingMetrics,
    canonical_parse,
    canonical_serialize,
    format_ts,
    new_job_id,
    parse_ts,
    utcnow,
)
from .errors import (
    IllegalTransition,
    JobNotFound,
    MissingAttestation,
    MissingOutputs,
    StaleLease,
    Unauthorized,
    ValidationFailed,
)
from .storage import _atomic_write

log = logging.getLogger(__name__)

DEFAULT_LEASE_SECONDS = 300
MAX_ATTEMPTS = 3


@dataclass(frozen=True)
class QueueEntry:
    job_id: str
    enqueued_at: datetime
    attempt: int = 0
    visibility_deadline: datetime | None = None
    lease_token: str | None = None
    worker_id: str | None = None
    seq: int = 0  # submission order; breaks ties between equal enqueue times

    def leased(self, now: datetime) -> bool:
        return self.lease_token is not None and self.visibility_deadline is not None and now < self.visibility_deadline

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "enqueued_at": format_ts(self.enqueued_at),
            "attempt": self.attempt,
            "visibility_deadline": format_ts(self.visibility_deadline) if self.visibility_deadline else None,
            "lease_token": self.lease_token,
            "worker_id": self.worker_id,
            "seq": self.seq,
        }

    @classmethod
    def from_dict(cls, d: dict) -> QueueEntry:
        return cls(
            job_id=d["job_id"],
            enqueued_at=parse_ts(d["enqueued_at"]),
            attempt=d["attempt"],
            visibility_deadline=parse_ts(d["visibility_deadline"]) if d.get("visibility_deadline") else None,
            lease_token=d.get("lease_token"),
            worker_id=d.get("worker_id"),
            seq=d.get("seq", 0),
        )


@dataclass(frozen=True)
class Lease:
    job_id: str
    worker_id: str
    token: str
    attempt: int
    expires_at: datetime


def required_outputs(job_id: str) -> tuple[str, ...]:
    return (MODEL_NAME, METRICS_NAME, link_name(job_id), aibom_name(job_id))


class Orchestrator:
    def __init__(
        self,
        state_dir: str | os.PathLike[str] | None = None,
        *,
        lease_seconds: float = DEFAULT_LEASE_SECONDS,
        max_attempts: int = MAX_ATTEMPTS,
        clock: Callable[[], datetime] = utcnow,
        input_check: Callable[[JobSpec], None] | None = None,
    ) -> None:
        self.lease_seconds = lease_seconds
        self.max_attempts = max_attempts
        self.clock = clock
        self.input_check = input_check
        self._lock = threading.RLock()
        self._jobs: dict[str, JobRecord] = {}
        self._queue: dict[str, QueueEntry] = {}
        self._workers: set[str] = set()
        self._seq = 0
        self._dir = Path(state_dir) if state_dir is not None else None
        if self._dir is not None:
            (self._dir / "jobs").mkdir(parents=True, exist_ok=True)
            (self._dir / "queue").mkdir(parents=True, exist_ok=True)
            self._load()

    # -- persistence ---------------------------------------------------------

    def _load(self) -> None:
        assert self._dir is not None
        for path in (self._dir / "jobs").glob("*.json"):
            rec = JobRecord.from_dict(canonical_parse(path.read_bytes()))
            self._jobs[rec.job_id] = rec
        for path in (self._dir / "queue").glob("*.json"):
            entry = QueueEntry.from_dict(canonical_parse(path.read_bytes()))
            self._queue[entry.job_id] = entry
            self._seq = max(self._seq, entry.seq)

    def _save_job(self, rec: JobRecord) -> None:
        self._jobs[rec.job_id] = rec
        if self._dir is not None:
            _atomic_write(self._dir / "jobs" / f"{rec.job_id}.json", canonical_serialize(rec.to_dict()))

    def _save_entry(self, entry: QueueEntry) -> None:
        self._queue[entry.job_id] = entry
        if self._dir is not None:
            _atomic_write(self._dir / "queue" / f"{entry.job_id}.json", canonical_serialize(entry.to_dict()))

    def _drop_entry(self, job_id: str) -> None:
        self._queue.pop(job_id, None)
        if self._dir is not None:
            try:
                (self._dir / "queue" / f"{job_id}.json").unlink()
            except FileNotFoundError:
                pass

    def _transition(self, rec: JobRecord, new: JobState, **changes) -> JobRecord:
        if new not in ALLOWED_TRANSITIONS[rec.state]:
            raise IllegalTransition(f"{rec.job_id}: {rec.state.value} -> {new.value}")
        updated = dataclasses.replace(rec, state=new, **changes)
        self._save_job(updated)
        return updated

    # -- operations ----------------------------------------------------------

    def register_worker(self, worker_id: str | None = None) -> str:
        worker_id = worker_id or f"worker-{uuid.uuid4().hex[:8]}"
        with self._lock:
            self._workers.add(worker_id)
        return worker_id

    def submit_job(self, spec: JobSpec, principal: str | None) -> JobRecord:
        if not principal:
            raise Unauthorized("no authenticated principal")
        spec = dataclasses.replace(spec, submitter=principal)
        spec.config.validate()
        if self.input_check is not None:
            self.input_check(spec)
        now = self.clock()
        rec = JobRecord(job_id=new_job_id(), spec=spec, state=JobState.SUBMITTED, created_at=now)
        with self._lock:
            self._seq += 1
            self._save_job(rec)
            self._save_entry(QueueEntry(job_id=rec.job_id, enqueued_at=now, seq=self._seq))
        log.info("job %s submitted by %s", rec.job_id, principal)
        return rec

    def reap_expired(self) -> list[str]:
        """Release expired leases; fail jobs that used up their attempts."""
        failed = []
        with self._lock:
            now = self.clock()
            for entry in list(self._queue.values()):
                if entry.lease_token is None or entry.visibility_deadline is None or now < entry.visibility_deadline:
                    continue
                if entry.attempt >= self.max_attempts:
                    rec = self._jobs[entry.job_id]
                    self._transition(rec, JobState.FAILED, finished_at=now, failure_reason="retries exhausted")
                    self._drop_entry(entry.job_id)
                    failed.append(entry.job_id)
                else:
                    self._save_entry(dataclasses.replace(entry, lease_token=None, worker_id=None))
        return failed

    def claim_job(self, worker_id: str) -> tuple[JobRecord, Lease] | None:
        with self._lock:
            if worker_id not in self._workers:
                raise Unauthorized(f"worker {worker_id!r} is not registered")
            self.reap_expired()
            now = self.clock()
            waiting = sorted(
                (e for e in self._queue.values() if e.lease_token is None),
                key=lambda e: (e.enqueued_at, e.seq, e.job_id),
            )
            if not waiting:
                return None
            entry = waiting[0]
            deadline = now + timedelta(seconds=self.lease_seconds)
            entry = dataclasses.replace(
                entry,
                attempt=entry.attempt + 1,
                visibility_deadline=deadline,
                lease_token=uuid.uuid4().hex,
                worker_id=worker_id,
            )
            self._save_entry(entry)
            rec = self._jobs[entry.job_id]
            if rec.state is JobState.SUBMITTED:
                rec = self._transition(rec, JobState.RUNNING, started_at=now, attempt=entry.attempt)
            else:
                rec = dataclasses.replace(rec, attempt=entry.attempt)
                self._save_job(rec)
            lease = Lease(entry.job_id, worker_id, entry.lease_token, entry.attempt, deadline)
            return rec, lease

    def _check_lease(self, job_id: str, lease: Lease) -> QueueEntry:
        entry = self._queue.get(job_id)
        if entry is None or entry.lease_token != lease.token or lease.job_id != job_id:
            raise StaleLease(f"lease on {job_id} is not current")
        if not entry.leased(self.clock()):
            raise StaleLease(f"lease on {job_id} expired")
        return entry

    def _get(self, job_id: str) -> JobRecord:
        rec = self._jobs.get(job_id)
        if rec is None:
            raise JobNotFound(job_id)
        return rec

    def complete_job(
        self,
        job_id: str,
        lease: Lease,
        outputs: Iterable[ArtifactRef],
        metrics: TrainingMetrics | None = None,
    ) -> JobRecord:
        outputs = tuple(outputs)
        with self._lock:
            rec = self._get(job_id)
            if rec.state is JobState.COMPLETED:
                if _same_outputs(rec.outputs, outputs):
                    return rec
                raise StaleLease(f"{job_id} already completed with different outputs")
            self._check_lease(job_id, lease)
            names = {o.name for o in outputs}
            missing_att = [n for n in (link_name(job_id), aibom_name(job_id)) if n not in names]
            if missing_att:
                raise MissingAttestation(f"{job_id}: completion refused, missing {', '.join(missing_att)}")
            missing = [n for n in (MODEL_NAME, METRICS_NAME) if n not in names]
            if missing:
                raise MissingOutputs(f"{job_id}: completion refused, missing {', '.join(missing)}")
            rec = self._transition(
                rec, JobState.COMPLETED, finished_at=self.clock(), outputs=outputs, metrics=metrics
            )
            self._drop_entry(job_id)
            return rec

    def fail_job(self, job_id: str, lease: Lease, reason: str) -> JobRecord:
        with self._lock:
            rec = self._get(job_id)
            self._check_lease(job_id, lease)
            rec = self._transition(rec, JobState.FAILED, finished_at=self.clock(), failure_reason=reason)
            self._drop_entry(job_id)
            return rec

    def job_status(self, job_id: str, principal: str | None) -> JobRecord:
        if not principal:
            raise Unauthorized("no authenticated principal")
        with self._lock:
            rec = self._get(job_id)
        if rec.spec.submitter != principal:
            raise Unauthorized(f"{principal!r} does not own job {job_id}")
        return rec

    # -- introspection -------------------------------------------------------

    def get(self, job_id: str) -> JobRecord:
        with self._lock:
            return self._get(job_id)

    def jobs(self) -> list[JobRecord]:
        with self._lock:
            return list(self._jobs.values())

    def queue(self) -> list[QueueEntry]:
        with self._lock:
            return list(self._queue.values())

    def pending(self) -> int:
        with self._lock:
            return len(self._queue)


def _same_outputs(a: Iterable[ArtifactRef], b: Iterable[ArtifactRef]) -> bool:
    key = lambda refs: sorted((r.name, r.digest.hex) for r in refs)  # noqa: E731
    return key(a) == key(b)


__all__ = ["Lease", "Orchestrator", "QueueEntry", "ValidationFailed", "required_outputs"]
