"""Vulnerability scanning of the worker manifest against a local advisory file.

Advisory file format (JSON)::

    {"advisories": [
        {"advisory_id": "ADV-1", "component_name": "numpy",
         "version_range": ">=1.0,<1.22", "severity": "HIGH"}
    ]}

``version_range`` is a comma-separated list of comparison clauses
(``==``, ``!=``, ``<``, ``<=``, ``>``, ``>=``) evaluated with
``packaging`` version ordering; ``*`` or an empty string matches all.
"""

from __future__ import annotations

import enum
import importlib.metadata
import json
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Iterable

from packaging.specifiers import InvalidSpecifier, SpecifierSet
from packaging.version import InvalidVersion, Version

from .core import ArtifactRef, Digest, canonical_serialize, compute_digest, format_ts, utcnow

log = logging.getLogger(__name__)

SCANS_NAMESPACE = "scans"


class Severity(str, enum.Enum):
    LOW = "LOW"
    MEDIUM = "MEDIUM"
    HIGH = "HIGH"
    CRITICAL = "CRITICAL"


@dataclass(frozen=True)
class Advisory:
    advisory_id: str
    component_name: str
    version_range: str
    severity: Severity

    def matches(self, name: str, version: str) -> bool:
        if _norm(name) != _norm(self.component_name):
            return False
        rng = self.version_range.strip()
        if rng in ("", "*"):
            return True
        try:
            return Version(version) in SpecifierSet(rng)
        except (InvalidVersion, InvalidSpecifier):
            return False


def _norm(name: str) -> str:
    return name.strip().lower().replace("_", "-")


@dataclass(frozen=True)
class AdvisoryDb:
    entries: tuple[Advisory, ...] = ()

    def __post_init__(self) -> None:
        ids = [a.advisory_id for a in self.entries]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise ValueError(f"duplicate advisory ids: {sorted(dupes)}")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> AdvisoryDb:
        return cls(
            tuple(
                Advisory(
                    advisory_id=e["advisory_id"],
                    component_name=e["component_name"],
                    version_range=e.get("version_range", "*"),
                    severity=Severity(e["severity"].upper()),
                )
                for e in d.get("advisories", [])
            )
        )

    @classmethod
    def load(cls, path: str | Path) -> AdvisoryDb:
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))


@dataclass(frozen=True)
class Finding:
    advisory_id: str
    component_name: str
    installed_version: str
    severity: Severity

    def to_dict(self) -> dict[str, str]:
        return {
            "advisory_id": self.advisory_id,
            "component_name": self.component_name,
            "installed_version": self.installed_version,
            "severity": self.severity.value,
        }


@dataclass(frozen=True)
class ScanReport:
    scanned_at: datetime
    target_digest: Digest
    findings: tuple[Finding, ...]
    summary: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scanned_at": format_ts(self.scanned_at),
            "target_digest": self.target_digest.to_dict(),
            "findings": [f.to_dict() for f in self.findings],
            "summary": dict(self.summary),
        }


def summarize(findings: Iterable[Finding]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for f in findings:
        counts[f.severity.value] = counts.get(f.severity.value, 0) + 1
    return dict(sorted(counts.items()))


def manifest_digest(manifest: Iterable[tuple[str, str]]) -> Digest:
    return compute_digest(canonical_serialize(sorted([n, v] for n, v in manifest)))


def scan(
    manifest: Iterable[tuple[str, str]],
    db: AdvisoryDb,
    *,
    target_digest: Digest | None = None,
    now: datetime | None = None,
) -> ScanReport:
    manifest = sorted(manifest)
    findings = [
        Finding(a.advisory_id, name, version, a.severity)
        for name, version in manifest
        for a in db.entries
        if a.matches(name, version)
    ]
    findings.sort(key=lambda f: (f.component_name, f.advisory_id))
    return ScanReport(
        scanned_at=now or utcnow(),
        target_digest=target_digest or manifest_digest(manifest),
        findings=tuple(findings),
        summary=summarize(findings),
    )


def installed_manifest() -> list[tuple[str, str]]:
    """(name, version) of every distribution visible to the worker process."""
    seen: dict[str, str] = {}
    for dist in importlib.metadata.distributions():
        name = dist.metadata["Name"]
        if name:
            seen.setdefault(name, dist.version)
    return sorted(seen.items())


class ScanScheduler:
    """Background loop that scans the worker manifest and publishes reports.

    ``publish`` stores the canonical report bytes (typically
    ``ObjectStore.put_object`` under the ``scans`` namespace) and returns the
    stored ref; the newest ref is exposed as :attr:`latest`.
    """

    def __init__(
        self,
        db_loader: Callable[[], AdvisoryDb],
        publish: Callable[[str, bytes], ArtifactRef],
        manifest: Callable[[], list[tuple[str, str]]] = installed_manifest,
    ) -> None:
        self.db_loader = db_loader
        self.publish = publish
        self.manifest = manifest
        self.latest: ArtifactRef | None = None
        self.latest_summary: dict[str, int] | None = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()

    def run_once(self) -> ArtifactRef:
        report = scan(self.manifest(), self.db_loader())
        name = report.scanned_at.strftime("%Y%m%dT%H%M%S%fZ") + ".json"
        ref = self.publish(name, canonical_serialize(report.to_dict()))
        with self._lock:
            self.latest, self.latest_summary = ref, dict(report.summary)
        log.info("scan %s: %s", name, report.summary or "no findings")
        return ref

    def snapshot(self) -> tuple[ArtifactRef | None, dict[str, int] | None]:
        with self._lock:
            return self.latest, self.latest_summary

    def _loop(self, interval: float) -> None:
        while not self._stop.is_set():
            try:
                self.run_once()
            except Exception:  # keep the loop alive; the next tick retries
                log.exception("vulnerability scan failed")
            self._stop.wait(interval)

    def schedule_scans(self, interval_seconds: float) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, args=(interval_seconds,), daemon=True, name="scanner")
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
