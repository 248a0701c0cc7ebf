"""CycloneDX 1.6 flavoured AI bill of materials with an embedded signature.

The field subset is frozen; ``docs/aibom-schema.md`` documents it.
"""

from __future__ import annotations

import base64
import binascii
import functools
import re
import uuid
from pathlib import Path
from typing import Any, Callable, Mapping

from . import __version__
from .attestation import (
    BASE_MODEL_NAME,
    DATASET_NAME,
    LOG_NAME,
    METRICS_NAME,
    MODEL_NAME,
    LinkFile,
    link_name,
    verify_link,
)
from .core import (
    ArtifactRef,
    EnvironmentSnapshot,
    JobRecord,
    TrainingMetrics,
    canonical_parse,
    canonical_serialize,
    compute_digest,
    decimal_string,
    format_ts,
    is_valid_hex,
    utcnow,
)
from .errors import AlreadySigned, IncompleteJob, NotFound, StorageError
from .signing import (
    AIBOM_PAYLOAD_TYPE,
    SCHEMAS,
    SIGNATURE_ALGORITHM,
    KeyPair,
    SignedEnvelope,
    VerificationReport,
    key_id_for,
    pae,
    verify_signature,
)

BOM_FORMAT = "CycloneDX"
SPEC_VERSION = "1.6"
TOOL_NAME = "verifiable-training"
COMPONENT_TYPES = ("machine-learning-model", "data", "container", "library")
FILE_BACKED_TYPES = ("machine-learning-model", "data", "container")
LINK_REFERENCE_TYPE = "attestation"
SCAN_REFERENCE_TYPE = "component-analysis-report"
HASH_ALG = "SHA-256"

_TOP_LEVEL = {
    "bomFormat",
    "specVersion",
    "serialNumber",
    "version",
    "metadata",
    "components",
    "externalReferences",
    "properties",
    "signature",
}
_SERIAL_RE = re.compile(r"^urn:uuid:[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$")


@functools.lru_cache(maxsize=1)
def framework_digest() -> str:
    """Digest of the reference trainer source, recorded as the framework component."""
    return compute_digest((Path(__file__).parent / "trainer.py").read_bytes()).hex


def _hashes(hex_digest: str) -> list[dict[str, str]]:
    return [{"alg": HASH_ALG, "content": hex_digest}]


def component(
    type_: str,
    name: str,
    version: str,
    hex_digest: str,
    description: str | None = None,
) -> dict[str, Any]:
    entry: dict[str, Any] = {
        "type": type_,
        "bom-ref": name,
        "name": name,
        "version": version,
        "hashes": _hashes(hex_digest),
    }
    if description:
        entry["description"] = description
    return entry


def _prop(name: str, value: Any) -> dict[str, str]:
    return {"name": name, "value": str(value)}


def generate_aibom(
    job: JobRecord,
    link_ref: ArtifactRef,
    env: EnvironmentSnapshot,
    metrics: TrainingMetrics,
    *,
    scan_summary: Mapping[str, int] | None = None,
) -> dict[str, Any]:
    """Build the unsigned AIBOM for a job whose model and metrics are uploaded."""
    model = job.output(MODEL_NAME)
    metrics_ref = job.output(METRICS_NAME)
    missing = [n for n, r in ((MODEL_NAME, model), (METRICS_NAME, metrics_ref)) if r is None]
    if missing:
        raise IncompleteJob(f"job {job.job_id} has no {', '.join(missing)} output")
    if link_ref.digest is None:
        raise IncompleteJob("link reference carries no digest")

    spec = job.spec
    cfg = spec.config
    components = [
        component("data", DATASET_NAME, spec.dataset.digest.hex[:12], spec.dataset.digest.hex,
                  "training dataset (CSV, last column is the target)"),
        component("data", METRICS_NAME, job.job_id, metrics_ref.digest.hex, "training metrics"),
    ]
    if spec.base_model is not None:
        components.append(
            component("machine-learning-model", BASE_MODEL_NAME, spec.base_model.digest.hex[:12],
                      spec.base_model.digest.hex, "warm-start model")
        )
    log_ref = job.output(LOG_NAME)
    if log_ref is not None:
        components.append(component("data", LOG_NAME, job.job_id, log_ref.digest.hex, "training log"))
    framework_name, _, framework_version = cfg.framework_tag.partition("/")
    components.append(component("library", framework_name, framework_version, framework_digest(),
                                "reference trainer"))
    components.append(component("container", "worker-image", env.platform_version,
                                env.worker_image_digest.hex, "worker runtime manifest"))

    external = [
        {
            "type": LINK_REFERENCE_TYPE,
            "url": link_ref.name,
            "comment": "in-toto link for the train step",
            "hashes": _hashes(link_ref.digest.hex),
        }
    ]
    if env.scanner_report_ref is not None:
        external.append(
            {
                "type": SCAN_REFERENCE_TYPE,
                "url": env.scanner_report_ref.name,
                "comment": "vulnerability scan of the worker image",
                "hashes": _hashes(env.scanner_report_ref.digest.hex),
            }
        )

    properties = [
        _prop("job:id", job.job_id),
        _prop("job:submitter", spec.submitter),
        _prop("training:task", cfg.task.value),
        _prop("training:epochs", cfg.epochs),
        _prop("training:batch_size", cfg.batch_size),
        _prop("training:learning_rate", repr(float(cfg.learning_rate))),
        _prop("training:seed", cfg.seed),
        _prop("training:framework", cfg.framework_tag),
        _prop("metrics:final_loss", "" if metrics.final_loss is None else decimal_string(metrics.final_loss, 12)),
        _prop("metrics:duration_seconds", decimal_string(metrics.duration_seconds)),
        _prop("environment:hostname", env.hostname),
        _prop("environment:cpu_model", env.cpu_model),
        _prop("environment:total_memory_bytes", env.total_memory_bytes),
        _prop("environment:wall_clock_start", format_ts(env.wall_clock_start)),
        _prop("environment:wall_clock_end", format_ts(env.wall_clock_end)),
    ]
    if scan_summary is not None:
        for severity in sorted(scan_summary):
            properties.append(_prop(f"scan:findings:{severity}", scan_summary[severity]))

    return {
        "bomFormat": BOM_FORMAT,
        "specVersion": SPEC_VERSION,
        "serialNumber": f"urn:uuid:{uuid.uuid4()}",
        "version": 1,
        "metadata": {
            "timestamp": format_ts(utcnow()),
            "tools": {"components": [{"type": "application", "name": TOOL_NAME, "version": __version__}]},
            "component": component("machine-learning-model", MODEL_NAME, job.job_id, model.digest.hex,
                                   f"{cfg.task.value} model trained by job {job.job_id}"),
        },
        "components": components,
        "externalReferences": external,
        "properties": properties,
    }


def signing_payload(doc: Mapping[str, Any]) -> bytes:
    unsigned = {k: v for k, v in doc.items() if k != "signature"}
    return pae(AIBOM_PAYLOAD_TYPE, canonical_serialize(unsigned))


def embed_signature(doc: Mapping[str, Any], key: KeyPair) -> dict[str, Any]:
    if "signature" in doc:
        raise AlreadySigned("AIBOM already carries a signature block")
    sig = key.sign(signing_payload(doc))
    signed = dict(doc)
    signed["signature"] = {
        "algorithm": SIGNATURE_ALGORITHM,
        "keyId": key.key_id,
        "value": base64.b64encode(sig).decode("ascii"),
    }
    return signed


def serialize_aibom(doc: Mapping[str, Any]) -> bytes:
    return canonical_serialize(doc)


# ---------------------------------------------------------------------------
# schema


def _check_hashes(hashes: Any, where: str) -> list[str]:
    if not isinstance(hashes, list):
        return [f"{where}: hashes must be a list"]
    problems = []
    for h in hashes:
        if not isinstance(h, dict) or h.get("alg") != HASH_ALG or not is_valid_hex(h.get("content")):
            problems.append(f"{where}: malformed {HASH_ALG} digest {h!r}")
    return problems


def _check_component(c: Any, where: str) -> list[str]:
    if not isinstance(c, dict):
        return [f"{where}: component must be an object"]
    name = c.get("name")
    label = f"component {name!r}" if isinstance(name, str) else where
    problems = []
    if c.get("type") not in COMPONENT_TYPES:
        problems.append(f"{label}: type must be one of {', '.join(COMPONENT_TYPES)}")
    for key in ("name", "version"):
        if not isinstance(c.get(key), str) or not c.get(key):
            problems.append(f"{label}: missing field {key}")
    if "description" in c and not isinstance(c["description"], str):
        problems.append(f"{label}: description must be a string")
    hashes = c.get("hashes", [])
    problems += _check_hashes(hashes, label)
    if c.get("type") in FILE_BACKED_TYPES and not hashes:
        problems.append(f"{label}: file-backed component needs at least one hash")
    return problems


def validate_schema(doc: Any) -> list[str]:
    """Return every structural violation; empty means the document conforms."""
    if not isinstance(doc, dict):
        return ["document must be a JSON object"]
    problems: list[str] = []
    for key in sorted(_TOP_LEVEL - {"signature"}):
        if key not in doc:
            problems.append(f"missing field {key}")
    for key in sorted(set(doc) - _TOP_LEVEL):
        problems.append(f"unexpected field {key}")

    if "bomFormat" in doc and doc["bomFormat"] != BOM_FORMAT:
        problems.append(f"bomFormat must be {BOM_FORMAT!r}")
    if "specVersion" in doc and doc["specVersion"] != SPEC_VERSION:
        problems.append(f"specVersion must be {SPEC_VERSION!r}")
    if "serialNumber" in doc and not (isinstance(doc["serialNumber"], str) and _SERIAL_RE.match(doc["serialNumber"])):
        problems.append("serialNumber must be a urn:uuid")
    if "version" in doc and (not isinstance(doc["version"], int) or isinstance(doc["version"], bool)):
        problems.append("version must be an integer")

    meta = doc.get("metadata")
    if "metadata" in doc:
        if not isinstance(meta, dict):
            problems.append("metadata must be an object")
        else:
            for key in ("timestamp", "tools", "component"):
                if key not in meta:
                    problems.append(f"missing field metadata.{key}")
            if "timestamp" in meta and not isinstance(meta["timestamp"], str):
                problems.append("metadata.timestamp must be a string")
            if "component" in meta:
                problems += _check_component(meta["component"], "metadata.component")

    comps = doc.get("components")
    if "components" in doc:
        if not isinstance(comps, list):
            problems.append("components must be a list")
        else:
            for i, c in enumerate(comps):
                problems += _check_component(c, f"components[{i}]")

    refs = doc.get("externalReferences")
    if "externalReferences" in doc:
        if not isinstance(refs, list):
            problems.append("externalReferences must be a list")
        else:
            links = [r for r in refs if isinstance(r, dict) and r.get("type") == LINK_REFERENCE_TYPE]
            if len(links) != 1:
                problems.append(f"externalReferences must hold exactly one {LINK_REFERENCE_TYPE} reference")
            for i, r in enumerate(refs):
                if not isinstance(r, dict) or not isinstance(r.get("url"), str) or not isinstance(r.get("type"), str):
                    problems.append(f"externalReferences[{i}] needs string type and url")
                    continue
                hashes = r.get("hashes", [])
                problems += _check_hashes(hashes, f"externalReferences[{i}]")
                if not hashes:
                    problems.append(f"externalReferences[{i}] ({r['url']}) carries no digest")

    props = doc.get("properties")
    if "properties" in doc:
        if not isinstance(props, list) or not all(
            isinstance(p, dict) and isinstance(p.get("name"), str) and isinstance(p.get("value"), str)
            for p in props
        ):
            problems.append("properties must be a list of string name/value pairs")

    if "signature" in doc:
        sig = doc["signature"]
        if not isinstance(sig, dict) or not all(isinstance(sig.get(k), str) for k in ("algorithm", "keyId", "value")):
            problems.append("signature must hold string algorithm, keyId and value")
    return problems


SCHEMAS[AIBOM_PAYLOAD_TYPE] = validate_schema


# ---------------------------------------------------------------------------
# verification


def link_reference(doc: Mapping[str, Any]) -> tuple[str, str] | None:
    """(url, sha256 hex) of the link reference, if the document has exactly one."""
    refs = [r for r in doc.get("externalReferences", []) or []
            if isinstance(r, dict) and r.get("type") == LINK_REFERENCE_TYPE]
    if len(refs) != 1:
        return None
    ref = refs[0]
    hashes = ref.get("hashes") or []
    if not hashes or not isinstance(hashes[0], dict):
        return None
    return ref.get("url"), hashes[0].get("content")


def job_id_of(doc: Mapping[str, Any]) -> str | None:
    for p in doc.get("properties", []) or []:
        if isinstance(p, dict) and p.get("name") == "job:id":
            return p.get("value")
    return None


def file_components(doc: Mapping[str, Any]) -> dict[str, str]:
    """name -> sha256 hex for every file-backed component, model included."""
    out: dict[str, str] = {}
    meta = doc.get("metadata") or {}
    entries = [meta.get("component")] + list(doc.get("components") or [])
    for c in entries:
        if not isinstance(c, dict) or c.get("type") not in FILE_BACKED_TYPES or c.get("type") == "container":
            continue
        hashes = c.get("hashes") or []
        if hashes and isinstance(hashes[0], dict):
            out[c.get("name")] = hashes[0].get("content")
    return out


def _signature_ok(doc: Mapping[str, Any], public_key: bytes) -> tuple[bool, str]:
    sig = doc.get("signature")
    if not isinstance(sig, dict):
        return False, "document is unsigned"
    if sig.get("algorithm") != SIGNATURE_ALGORITHM:
        return False, f"unsupported algorithm {sig.get('algorithm')!r}"
    try:
        raw = base64.b64decode(sig.get("value", ""), validate=True)
    except (binascii.Error, ValueError, TypeError):
        return False, "signature value is not base64"
    try:
        payload = signing_payload(doc)
    except ValueError as exc:
        return False, f"document cannot be canonicalized: {exc}"
    if not verify_signature(public_key, payload, raw):
        return False, "signature does not verify under the platform key"
    if sig.get("keyId") != key_id_for(public_key):
        return False, "signature keyId does not name the platform key"
    return True, ""


ArtifactResolver = Callable[[str], bytes]


def verify_aibom(
    doc: Any,
    public_key: bytes,
    link_envelope: bytes | SignedEnvelope | None,
    artifact_resolver: ArtifactResolver | None = None,
) -> VerificationReport:
    """End-to-end check of an AIBOM, its link attestation and optionally stored artifacts.

    ``link_envelope`` should be the exact stored bytes of the link file; the
    AIBOM binds them by digest. ``artifact_resolver`` maps an artifact name to
    its stored bytes and may raise ``NotFound``.
    """
    report = VerificationReport()
    if isinstance(doc, (bytes, str)):
        try:
            doc = canonical_parse(doc)
        except ValueError as exc:
            report.add("schema_valid", False, f"AIBOM does not parse: {exc}")
            report.add("aibom_signature_valid", False, "not evaluated")
            return report

    problems = validate_schema(doc)
    report.add("schema_valid", not problems, "; ".join(problems))
    if not isinstance(doc, dict):
        report.add("aibom_signature_valid", False, "not evaluated")
        return report
    report.add("aibom_signature_valid", *_signature_ok(doc, public_key))

    ref = link_reference(doc)
    if isinstance(link_envelope, SignedEnvelope):
        link_bytes: bytes | None = link_envelope.to_bytes()
    else:
        link_bytes = link_envelope
    url = ref[0] if ref else link_name(job_id_of(doc) or "unknown")
    if link_bytes is None:
        report.add("link_reference_digest_matches", False, f"{url}: link file not available")
        report.add("link_envelope_valid", False, f"{url}: link file not available")
        return report

    actual = compute_digest(link_bytes).hex
    if ref is None:
        report.add("link_reference_digest_matches", False, "AIBOM holds no single link reference")
    else:
        report.add(
            "link_reference_digest_matches",
            actual == ref[1],
            "" if actual == ref[1] else f"{url}: expected {ref[1]} actual {actual}",
        )

    try:
        env = SignedEnvelope.from_bytes(link_bytes)
    except ValueError as exc:
        report.add("link_envelope_valid", False, f"{url}: {exc}")
        return report
    link_report = verify_link(env, public_key)
    report.add("link_envelope_valid", link_report.passed, "; ".join(link_report.reasons))

    link = None
    if link_report.checks["schema_valid"].passed:
        link = LinkFile.from_envelope(env)
        bad = []
        for name, hex_digest in file_components(doc).items():
            recorded = link.lookup(name)
            if recorded is None:
                bad.append(f"{name}: not recorded in link")
            elif recorded.hex != hex_digest:
                bad.append(f"{name}: AIBOM {hex_digest} link {recorded.hex}")
        report.add("components_match_link", not bad, "; ".join(bad))

    if artifact_resolver is not None:
        mismatched = []
        for name, hex_digest in sorted(file_components(doc).items()):
            try:
                data = artifact_resolver(name)
            except (NotFound, StorageError, KeyError, ValueError) as exc:
                mismatched.append(f"{name}: missing ({exc})")
                continue
            got = compute_digest(data).hex
            if got != hex_digest:
                mismatched.append(f"{name}: expected {hex_digest} actual {got}")
        report.add("all_artifacts_match", not mismatched, "; ".join(mismatched))
    return report
