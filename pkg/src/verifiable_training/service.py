"""Wiring of storage, orchestrator, workers, keys and scanner into one platform.

Configuration comes from environment variables:

``AIBOMGEN_DATA_DIR``       root for storage and job state (default ``./data``)
``AIBOMGEN_SIGNING_KEY``    PEM Ed25519 private key (default ``<data>/keys/platform.key``)
``AIBOMGEN_PUBLIC_KEY``     PEM public key (default ``<data>/keys/platform.pub``)
``AIBOMGEN_TOKENS_FILE``    JSON bearer-token table ``{"<token>": "<subject>"}``
``AIBOMGEN_LISTEN_ADDR``    ``host:port`` for the HTTP gateway (default ``127.0.0.1:8080``)
``AIBOMGEN_ADVISORY_DB``    advisory JSON file; enables the vulnerability scanner
``AIBOMGEN_SCAN_INTERVAL``  seconds between scans (default 3600)
``AIBOMGEN_WORKERS``        background worker threads (default 1)
``AIBOMGEN_LEASE_SECONDS``  job lease duration (default 300)
``AIBOMGEN_GRANT_TTL``      download grant lifetime in seconds (default 900)
"""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .aibom import job_id_of, link_reference, verify_aibom
from .attestation import (
    MatchResult,
    MatchStatus,
    LinkFile,
    link_name,
    verify_artifact_against_link,
    verify_link,
)
from .core import ArtifactRef, JobRecord, JobSpec, JobState, TrainingConfig, canonical_parse, compute_digest
from .errors import (
    KeyUnavailable,
    MalformedCsv,
    NotFound,
    StorageError,
    ValidationFailed,
)
from .orchestrator import Orchestrator
from .scanner import SCANS_NAMESPACE, AdvisoryDb, ScanScheduler
from .signing import KeyPair, SignedEnvelope, VerificationReport, verify_envelope
from .storage import AccessGrant, ObjectKey, ObjectStore
from .trainer import check_header
from .worker import Worker, WorkerPool, upload_key, upload_namespace

log = logging.getLogger(__name__)

_SUBJECT_RE = re.compile(r"^[A-Za-z0-9_-]{1,64}$")


@dataclass
class Settings:
    data_dir: Path = Path("data")
    signing_key: Path | None = None
    public_key: Path | None = None
    tokens_file: Path | None = None
    listen_addr: str = "127.0.0.1:8080"
    advisory_db: Path | None = None
    scan_interval: float = 3600.0
    workers: int = 1
    lease_seconds: float = 300.0
    grant_ttl: int = 900
    tokens: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_env(cls, env: dict[str, str] | None = None) -> Settings:
        env = dict(os.environ if env is None else env)
        opt = lambda name: Path(env[name]) if env.get(name) else None  # noqa: E731
        return cls(
            data_dir=Path(env.get("AIBOMGEN_DATA_DIR", "data")),
            signing_key=opt("AIBOMGEN_SIGNING_KEY"),
            public_key=opt("AIBOMGEN_PUBLIC_KEY"),
            tokens_file=opt("AIBOMGEN_TOKENS_FILE"),
            listen_addr=env.get("AIBOMGEN_LISTEN_ADDR", "127.0.0.1:8080"),
            advisory_db=opt("AIBOMGEN_ADVISORY_DB"),
            scan_interval=float(env.get("AIBOMGEN_SCAN_INTERVAL", 3600)),
            workers=int(env.get("AIBOMGEN_WORKERS", 1)),
            lease_seconds=float(env.get("AIBOMGEN_LEASE_SECONDS", 300)),
            grant_ttl=int(env.get("AIBOMGEN_GRANT_TTL", 900)),
        )

    @property
    def signing_key_path(self) -> Path:
        return self.signing_key or self.data_dir / "keys" / "platform.key"

    @property
    def public_key_path(self) -> Path:
        return self.public_key or self.data_dir / "keys" / "platform.pub"

    def load_tokens(self) -> dict[str, str]:
        table = dict(self.tokens)
        if self.tokens_file is not None:
            raw = json.loads(self.tokens_file.read_text("utf-8"))
            table.update(raw.get("tokens", raw))
        for subject in table.values():
            if not _SUBJECT_RE.match(subject):
                raise ValueError(f"subject {subject!r} must match {_SUBJECT_RE.pattern}")
        return table


def init_keys(settings: Settings, overwrite: bool = False) -> KeyPair:
    """Create the platform key pair on disk unless it already exists."""
    priv, pub = settings.signing_key_path, settings.public_key_path
    if priv.exists() and not overwrite:
        return KeyPair.load(priv)
    priv.parent.mkdir(parents=True, exist_ok=True)
    pub.parent.mkdir(parents=True, exist_ok=True)
    key = KeyPair.generate()
    key.save(priv, pub)
    return key


@dataclass
class StorageVerification:
    signature: VerificationReport
    results: list[MatchResult]

    @property
    def passed(self) -> bool:
        return self.signature.passed and bool(self.results) and all(r.ok for r in self.results)

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "signature": self.signature.to_dict(),
            "results": [r.to_dict() for r in self.results],
        }


class Platform:
    def __init__(self, settings: Settings, key: KeyPair | None = None, *, generate_keys: bool = True) -> None:
        self.settings = settings
        settings.data_dir.mkdir(parents=True, exist_ok=True)
        self.storage = ObjectStore(settings.data_dir / "storage")
        self.orchestrator = Orchestrator(
            settings.data_dir / "state",
            lease_seconds=settings.lease_seconds,
            input_check=self._check_inputs,
        )
        self.tokens = settings.load_tokens()
        self._key = key
        if self._key is None:
            try:
                self._key = KeyPair.load(settings.signing_key_path)
            except KeyUnavailable:
                if generate_keys and not settings.signing_key_path.exists():
                    self._key = init_keys(settings)
                else:
                    log.error("platform signing key unavailable at %s", settings.signing_key_path)
        if self._key is not None:
            self.public_key = self._key.public_key
        else:
            self.public_key = settings.public_key_path.read_bytes()
        self.storage.set_owner(SCANS_NAMESPACE, "platform")
        self.scanner: ScanScheduler | None = None
        if settings.advisory_db is not None:
            db_path = settings.advisory_db
            self.scanner = ScanScheduler(lambda: AdvisoryDb.load(db_path), self._publish_scan)
        self.worker = self.make_worker()
        self.pool: WorkerPool | None = None

    # -- components ----------------------------------------------------------

    def key_provider(self) -> KeyPair:
        if self._key is None:
            raise KeyUnavailable("platform signing key is not loaded")
        return self._key

    def make_worker(self) -> Worker:
        return Worker(self.storage, self.orchestrator, self.key_provider, scanner=self.scanner)

    def _publish_scan(self, name: str, data: bytes) -> ArtifactRef:
        return self.storage.put_object(ObjectKey(SCANS_NAMESPACE, name), data, "application/json")

    def start_background(self) -> None:
        if self.scanner is not None:
            self.scanner.schedule_scans(self.settings.scan_interval)
        if self.settings.workers > 0 and self.pool is None:
            self.pool = WorkerPool(self.make_worker, self.settings.workers)
            self.pool.start()

    def stop_background(self) -> None:
        if self.pool is not None:
            self.pool.stop()
            self.pool = None
        if self.scanner is not None:
            self.scanner.stop()

    def authenticate(self, token: str | None) -> str | None:
        if not token:
            return None
        return self.tokens.get(token)

    # -- engineer flows ------------------------------------------------------

    def upload(self, principal: str, data: bytes, media_type: str = "application/octet-stream") -> ArtifactRef:
        ns = upload_namespace(principal)
        self.storage.set_owner(ns, principal)
        return self.storage.put_object(upload_key(principal, compute_digest(data).hex), data, media_type)

    def _resolve_upload(self, principal: str, digest_hex: str, field_name: str) -> ArtifactRef:
        try:
            return self.storage.stat(upload_key(principal, digest_hex))
        except (NotFound, ValueError):
            raise ValidationFailed(field_name, f"no uploaded object with digest {digest_hex}") from None

    def _check_inputs(self, spec: JobSpec) -> None:
        key = upload_key(spec.submitter, spec.dataset.digest.hex)
        try:
            data = self.storage.get_object(key)
        except (StorageError, ValueError) as exc:
            raise ValidationFailed("dataset", str(exc)) from None
        try:
            check_header(data)
        except MalformedCsv as exc:
            raise ValidationFailed("dataset", str(exc)) from None
        if spec.base_model is not None and not self.storage.exists(upload_key(spec.submitter, spec.base_model.digest.hex)):
            raise ValidationFailed("base_model", "not uploaded")

    def submit(
        self,
        principal: str,
        dataset_digest: str,
        config: TrainingConfig,
        base_model_digest: str | None = None,
    ) -> JobRecord:
        dataset = self._resolve_upload(principal, dataset_digest, "dataset")
        base = self._resolve_upload(principal, base_model_digest, "base_model") if base_model_digest else None
        spec = JobSpec(dataset=dataset, config=config, submitter=principal, base_model=base)
        rec = self.orchestrator.submit_job(spec, principal)
        self.storage.set_owner(rec.job_id, principal)
        return rec

    def job_artifacts(self, job_id: str, principal: str) -> list[tuple[ArtifactRef, AccessGrant]]:
        rec = self.orchestrator.job_status(job_id, principal)
        if rec.state is not JobState.COMPLETED:
            return []
        return [
            (ref, self.storage.issue_grant(ObjectKey(job_id, ref.name), self.settings.grant_ttl, principal))
            for ref in rec.outputs
        ]

    # -- verification (read-only) -------------------------------------------

    def verify_link_bytes(self, data: bytes) -> VerificationReport:
        return verify_link(SignedEnvelope.from_bytes(data), self.public_key)

    def verify_hash(self, link_bytes: bytes, name: str, data: bytes) -> MatchResult:
        return verify_artifact_against_link(LinkFile.from_envelope(SignedEnvelope.from_bytes(link_bytes)), name, data)

    def verify_storage(self, link_bytes: bytes) -> StorageVerification:
        env = SignedEnvelope.from_bytes(link_bytes)
        sig = verify_envelope(env, self.public_key)
        link = LinkFile.from_envelope(env)
        job_id = link.job_id
        if job_id is None:
            raise ValueError("link does not name a job")
        results = []
        expected = {**link.materials, **link.products}
        for name in sorted(expected):
            try:
                data = self.storage.read_raw(ObjectKey(job_id, name))
            except (NotFound, ValueError):
                results.append(MatchResult(MatchStatus.MISSING, name, expected[name].hex))
                continue
            results.append(verify_artifact_against_link(link, name, data))
        own = link_name(job_id)
        try:
            stored = self.storage.read_raw(ObjectKey(job_id, own))
            want, got = compute_digest(link_bytes).hex, compute_digest(stored).hex
            results.append(MatchResult(MatchStatus.MATCH if want == got else MatchStatus.MISMATCH, own, want, got))
        except (NotFound, ValueError):
            results.append(MatchResult(MatchStatus.MISSING, own, compute_digest(link_bytes).hex))
        return StorageVerification(sig, results)

    def verify_aibom_bytes(self, data: bytes) -> VerificationReport:
        doc = canonical_parse(data)
        if not isinstance(doc, dict):
            raise ValueError("AIBOM must be a JSON object")
        job_id = job_id_of(doc)
        ref = link_reference(doc)
        link_bytes = None
        resolver = None
        if job_id is not None:
            try:
                ObjectKey(job_id, "probe")
            except ValueError:
                job_id = None
        if job_id is not None:
            name = ref[0] if ref and isinstance(ref[0], str) else link_name(job_id)
            try:
                link_bytes = self.storage.read_raw(ObjectKey(job_id, name))
            except (NotFound, ValueError):
                link_bytes = None

            def resolver(artifact: str) -> bytes:
                return self.storage.read_raw(ObjectKey(job_id, artifact))

        return verify_aibom(doc, self.public_key, link_bytes, resolver)
