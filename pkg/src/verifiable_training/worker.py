"""The fixed per-job pipeline run by worker nodes, and a small worker pool."""

from __future__ import annotations

import dataclasses
import functools
import logging
import os
import platform
import socket
import threading
import time
from datetime import datetime
from pathlib import Path
from typing import Callable

from . import __version__
from .aibom import embed_signature, generate_aibom, serialize_aibom, verify_aibom
from .attestation import (
    BASE_MODEL_NAME,
    DATASET_NAME,
    LOG_NAME,
    METRICS_NAME,
    MODEL_NAME,
    LinkFile,
    aibom_name,
    create_link,
    link_name,
    sign_link,
    verify_link,
)
from .core import (
    ArtifactRef,
    Digest,
    EnvironmentSnapshot,
    JobRecord,
    TrainingMetrics,
    canonical_parse,
    canonical_serialize,
    compute_digest,
    utcnow,
)
from .errors import ImmutabilityViolation, InputTamperDetected, IntegrityError, NotFound, PlatformError
from .orchestrator import Lease, Orchestrator
from .scanner import ScanScheduler
from .signing import KeyPair, SignedEnvelope
from .storage import ObjectKey, ObjectStore
from .trainer import parse_dataset, parse_model, serialize_model, train

log = logging.getLogger(__name__)

CSV_MEDIA_TYPE = "text/csv"
JSON_MEDIA_TYPE = "application/json"
MODEL_MEDIA_TYPE = "application/vnd.reftrainer.rtm1"


def upload_namespace(principal: str) -> str:
    return f"uploads.{principal}"


def upload_key(principal: str, digest_hex: str) -> ObjectKey:
    return ObjectKey(upload_namespace(principal), digest_hex)


@functools.lru_cache(maxsize=1)
def worker_image_digest() -> str:
    """Digest over (path, sha256) of every source file of this package.

    Stands in for a container image digest when the worker runs as a bare
    process.
    """
    root = Path(__file__).parent
    entries = sorted(
        [str(p.relative_to(root)), compute_digest(p.read_bytes()).hex] for p in root.rglob("*.py")
    )
    return compute_digest(canonical_serialize(entries)).hex


def _cpu_model() -> str:
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.startswith("model name"):
                return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine() or "unknown"


def _total_memory() -> int:
    try:
        return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        return 0


def capture_environment(start: datetime, end: datetime, scanner_report_ref: ArtifactRef | None = None) -> EnvironmentSnapshot:
    return EnvironmentSnapshot(
        worker_image_digest=Digest(worker_image_digest()),
        platform_version=(
            f"verifiable-training {__version__}; python {platform.python_version()}; {platform.system()} {platform.machine()}"
        ),
        hostname=socket.gethostname(),
        cpu_model=_cpu_model(),
        total_memory_bytes=_total_memory(),
        wall_clock_start=start,
        wall_clock_end=end,
        scanner_report_ref=scanner_report_ref,
    )


def metrics_document(job: JobRecord, metrics: TrainingMetrics, n_rows: int, n_features: int) -> dict:
    """Contents of metrics.json. Timings are left out so retries reproduce the same bytes."""
    return {
        "task": job.spec.config.task.value,
        "epochs": job.spec.config.epochs,
        "n_rows": n_rows,
        "n_features": n_features,
        "final_loss": metrics.final_loss,
        "loss_per_epoch": list(metrics.loss_per_epoch),
    }


class StepFailed(Exception):
    def __init__(self, step: str, cause: BaseException) -> None:
        self.step = step
        self.cause = cause
        super().__init__(f"{step}: {type(cause).__name__}: {cause}")


class Worker:
    def __init__(
        self,
        storage: ObjectStore,
        orchestrator: Orchestrator,
        key_provider: Callable[[], KeyPair],
        *,
        scanner: ScanScheduler | None = None,
        capture_log: bool = False,
        worker_id: str | None = None,
    ) -> None:
        self.storage = storage
        self.orchestrator = orchestrator
        self.key_provider = key_provider
        self.scanner = scanner
        self.capture_log = capture_log
        self.worker_id = orchestrator.register_worker(worker_id)

    def _put(self, job_id: str, name: str, data: bytes, media_type: str) -> ArtifactRef:
        return self.storage.put_object(ObjectKey(job_id, name), data, media_type)

    def _fetch(self, principal: str, ref: ArtifactRef, what: str) -> bytes:
        try:
            data = self.storage.get_object(upload_key(principal, ref.digest.hex))
        except IntegrityError as exc:
            raise InputTamperDetected(f"{what}: {exc}") from exc
        except NotFound as exc:
            raise InputTamperDetected(f"{what}: staged object disappeared ({exc})") from exc
        actual = compute_digest(data)
        if actual.hex != ref.digest.hex:
            raise InputTamperDetected(f"{what}: expected {ref.digest.hex} got {actual.hex}")
        return data

    def _prior_link(self, job_id: str, link: LinkFile, key: KeyPair) -> tuple[bytes, LinkFile] | None:
        """A link published by an earlier attempt whose lease ran out after publishing.

        It is reused when it is validly signed and records exactly the
        artifacts this attempt produced; anything else is a conflict.
        """
        lkey = ObjectKey(job_id, link_name(job_id))
        if not self.storage.exists(lkey):
            return None
        stored = self.storage.get_object(lkey)
        env = SignedEnvelope.from_bytes(stored)
        prior = LinkFile.from_envelope(env)
        same = dict(prior.materials) == dict(link.materials) and dict(prior.products) == dict(link.products)
        if not same or not verify_link(env, key.public_key).passed:
            raise ImmutabilityViolation(f"{lkey} already holds a different attestation")
        return stored, prior

    def _prior_aibom(self, job_id: str, link_bytes: bytes, key: KeyPair) -> bytes | None:
        akey = ObjectKey(job_id, aibom_name(job_id))
        if not self.storage.exists(akey):
            return None
        stored = self.storage.get_object(akey)
        if not verify_aibom(canonical_parse(stored), key.public_key, link_bytes).passed:
            raise ImmutabilityViolation(f"{akey} already holds a different AIBOM")
        return stored

    def run_job(self, job: JobRecord, lease: Lease) -> JobRecord:
        """Run the enforced pipeline; any step failure fails the job with that step's name."""
        try:
            return self._run(job, lease)
        except StepFailed as exc:
            step, cause = exc.step, exc.cause
            reason = f"{step}: {type(cause).__name__}: {cause}"
        log.warning("job %s failed: %s", job.job_id, reason)
        try:
            return self.orchestrator.fail_job(job.job_id, lease, reason)
        except PlatformError:
            log.exception("could not record failure of job %s", job.job_id)
            return self.orchestrator.get(job.job_id)

    def _run(self, job: JobRecord, lease: Lease) -> JobRecord:
        spec = job.spec
        principal = spec.submitter
        step = "fetch"
        try:
            dataset_bytes = self._fetch(principal, spec.dataset, "dataset")
            base_bytes = self._fetch(principal, spec.base_model, "base model") if spec.base_model else None

            step = "parse"
            dataset = parse_dataset(dataset_bytes)
            base_model = parse_model(base_bytes) if base_bytes is not None else None

            step = "environment"
            wall_start = utcnow()
            scan_ref, scan_summary = self.scanner.snapshot() if self.scanner else (None, None)

            step = "train"
            model, metrics = train(dataset, spec.config, init=base_model)

            step = "serialize"
            model_bytes = serialize_model(model)
            metrics_bytes = canonical_serialize(
                metrics_document(job, metrics, dataset.n_rows, dataset.n_features)
            )
            log_bytes = None
            if self.capture_log:
                lines = [f"job {job.job_id} epochs={spec.config.epochs}"]
                lines += [f"epoch {i + 1} loss {v!r}" for i, v in enumerate(metrics.loss_per_epoch)]
                log_bytes = ("\n".join(lines) + "\n").encode("utf-8")

            step = "upload"
            materials = [self._put(job.job_id, DATASET_NAME, dataset_bytes, CSV_MEDIA_TYPE)]
            if base_bytes is not None:
                materials.append(self._put(job.job_id, BASE_MODEL_NAME, base_bytes, MODEL_MEDIA_TYPE))
            products = [
                self._put(job.job_id, MODEL_NAME, model_bytes, MODEL_MEDIA_TYPE),
                self._put(job.job_id, METRICS_NAME, metrics_bytes, JSON_MEDIA_TYPE),
            ]
            if log_bytes is not None:
                products.append(self._put(job.job_id, LOG_NAME, log_bytes, "text/plain"))

            attest_started = time.perf_counter()
            step = "hash"
            local = {DATASET_NAME: dataset_bytes, MODEL_NAME: model_bytes, METRICS_NAME: metrics_bytes}
            if base_bytes is not None:
                local[BASE_MODEL_NAME] = base_bytes
            if log_bytes is not None:
                local[LOG_NAME] = log_bytes
            for ref in materials + products:
                if compute_digest(local[ref.name]).hex != ref.digest.hex:
                    raise IntegrityError(f"{ref.name}: stored digest differs from produced bytes")
            env = capture_environment(wall_start, utcnow(), scan_ref)

            step = "sign"
            key = self.key_provider()
            link = create_link(job, env, materials, products, duration_seconds=metrics.duration_seconds)
            prior = self._prior_link(job.job_id, link, key)
            if prior is not None:
                link_bytes, link = prior
                env = link.environment
            else:
                link_bytes = sign_link(link, key).to_bytes()
            link_ref = ArtifactRef(link_name(job.job_id), compute_digest(link_bytes), len(link_bytes), JSON_MEDIA_TYPE)

            step = "aibom"
            aibom_bytes = self._prior_aibom(job.job_id, link_bytes, key) if prior is not None else None
            if aibom_bytes is None:
                running = dataclasses.replace(job, outputs=tuple(products))
                doc = embed_signature(
                    generate_aibom(running, link_ref, env, metrics, scan_summary=scan_summary), key
                )
                aibom_bytes = serialize_aibom(doc)

            step = "publish"
            stored_link = self._put(job.job_id, link_name(job.job_id), link_bytes, JSON_MEDIA_TYPE)
            stored_aibom = self._put(job.job_id, aibom_name(job.job_id), aibom_bytes, JSON_MEDIA_TYPE)
            aibom_seconds = time.perf_counter() - attest_started

            step = "complete"
            final_metrics = dataclasses.replace(metrics, aibom_generation_seconds=aibom_seconds)
            return self.orchestrator.complete_job(
                job.job_id, lease, [*products, stored_link, stored_aibom], metrics=final_metrics
            )
        except Exception as exc:  # every failure is attributed to the step it happened in
            raise StepFailed(step, exc) from exc

    # -- driving -------------------------------------------------------------

    def run_once(self) -> JobRecord | None:
        claimed = self.orchestrator.claim_job(self.worker_id)
        if claimed is None:
            return None
        job, lease = claimed
        log.info("worker %s running job %s (attempt %d)", self.worker_id, job.job_id, lease.attempt)
        return self.run_job(job, lease)

    def drain(self, limit: int | None = None) -> list[JobRecord]:
        done = []
        while limit is None or len(done) < limit:
            rec = self.run_once()
            if rec is None:
                break
            done.append(rec)
        return done


class WorkerPool:
    """N workers polling the orchestrator from background threads."""

    def __init__(self, make_worker: Callable[[], Worker], size: int = 1, poll_interval: float = 0.2) -> None:
        self.workers = [make_worker() for _ in range(size)]
        self.poll_interval = poll_interval
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def _loop(self, worker: Worker) -> None:
        while not self._stop.is_set():
            try:
                rec = worker.run_once()
            except Exception:
                log.exception("worker %s crashed while claiming", worker.worker_id)
                rec = None
            if rec is None:
                self._stop.wait(self.poll_interval)

    def start(self) -> None:
        for w in self.workers:
            t = threading.Thread(target=self._loop, args=(w,), daemon=True, name=w.worker_id)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=10)
        self._threads.clear()


__all__ = ["Worker", "WorkerPool", "capture_environment", "upload_key", "worker_image_digest"]
