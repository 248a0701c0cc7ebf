"""in-toto style link metadata for the single enforced ``train`` step."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .core import (
    ArtifactRef,
    Digest,
    EnvironmentSnapshot,
    JobRecord,
    JobState,
    compute_digest,
    decimal_string,
    is_valid_hex,
    normalize_name,
)
from .errors import IllegalTransition, MissingDigest, MissingProduct
from .signing import (
    LINK_PAYLOAD_TYPE,
    SCHEMAS,
    KeyPair,
    SignedEnvelope,
    VerificationReport,
    key_id_for,
    sign_envelope,
    verify_envelope,
)

STEP_NAME = "train"
PIPELINE_PROGRAM = ("reftrainer", "train")
DATASET_NAME = "dataset.csv"
BASE_MODEL_NAME = "base_model.bin"
MODEL_NAME = "model.bin"
METRICS_NAME = "metrics.json"
LOG_NAME = "train.log"


def link_name(job_id: str) -> str:
    return f"{job_id}.link.json"


def aibom_name(job_id: str) -> str:
    return f"{job_id}.aibom.json"


def pipeline_command(job: JobRecord) -> list[str]:
    """The enforced invocation recorded in the link. Users supply only parameters."""
    cfg = job.spec.config
    cmd = [
        *PIPELINE_PROGRAM,
        "--job-id", job.job_id,
        "--task", cfg.task.value,
        "--epochs", str(cfg.epochs),
        "--batch-size", str(cfg.batch_size),
        "--learning-rate", repr(float(cfg.learning_rate)),
        "--seed", str(cfg.seed),
        "--dataset", DATASET_NAME,
    ]
    if job.spec.base_model is not None:
        cmd += ["--base-model", BASE_MODEL_NAME]
    return cmd


@dataclass(frozen=True)
class LinkFile:
    command: tuple[str, ...]
    materials: Mapping[str, Digest]
    products: Mapping[str, Digest]
    environment: EnvironmentSnapshot
    byproducts: Mapping[str, Any] = field(default_factory=dict)
    step_name: str = STEP_NAME

    @property
    def job_id(self) -> str | None:
        return job_id_from_command(self.command)

    def lookup(self, name: str) -> Digest | None:
        return self.materials.get(name) or self.products.get(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "_type": "link",
            "name": self.step_name,
            "command": list(self.command),
            "materials": {k: {"sha256": v.hex} for k, v in self.materials.items()},
            "products": {k: {"sha256": v.hex} for k, v in self.products.items()},
            "byproducts": dict(self.byproducts),
            "environment": self.environment.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> LinkFile:
        problems = validate_link_schema(d)
        if problems:
            raise ValueError("; ".join(problems))
        return cls(
            step_name=d["name"],
            command=tuple(d["command"]),
            materials={k: Digest(v["sha256"]) for k, v in d["materials"].items()},
            products={k: Digest(v["sha256"]) for k, v in d["products"].items()},
            byproducts=dict(d["byproducts"]),
            environment=EnvironmentSnapshot.from_dict(d["environment"]),
        )

    @classmethod
    def from_envelope(cls, env: SignedEnvelope) -> LinkFile:
        return cls.from_dict(env.document())


def job_id_from_command(command: Iterable[str]) -> str | None:
    cmd = list(command)
    try:
        return cmd[cmd.index("--job-id") + 1]
    except (ValueError, IndexError):
        return None


def _digest_map(refs: list[ArtifactRef], kind: str) -> dict[str, Digest]:
    out: dict[str, Digest] = {}
    for ref in refs:
        if getattr(ref, "digest", None) is None:
            raise MissingDigest(f"{kind} {ref.name!r} has no digest")
        name = normalize_name(ref.name)
        if name in out:
            raise ValueError(f"duplicate {kind} {name!r}")
        out[name] = ref.digest
    return out


def create_link(
    job: JobRecord,
    env: EnvironmentSnapshot,
    materials: list[ArtifactRef],
    products: list[ArtifactRef],
    *,
    duration_seconds: float = 0.0,
    return_code: int = 0,
) -> LinkFile:
    if job.state is not JobState.RUNNING:
        raise IllegalTransition(f"link requested for job in state {job.state.value}")
    if not products:
        raise MissingProduct("a completed training step must record at least one product")
    mats = _digest_map(materials, "material")
    prods = _digest_map(products, "product")
    overlap = set(mats) & set(prods)
    if overlap:
        raise ValueError(f"names used as both material and product: {sorted(overlap)}")
    return LinkFile(
        command=tuple(pipeline_command(job)),
        materials=mats,
        products=prods,
        byproducts={"return_code": return_code, "duration_seconds": decimal_string(duration_seconds)},
        environment=env,
    )


def sign_link(link: LinkFile, key: KeyPair) -> SignedEnvelope:
    return sign_envelope(link.to_dict(), LINK_PAYLOAD_TYPE, key)


# ---------------------------------------------------------------------------
# schema


def _check_digest_map(d: Any, where: str) -> list[str]:
    if not isinstance(d, dict):
        return [f"{where} must be an object"]
    problems = []
    for name, entry in d.items():
        try:
            normalize_name(name)
        except ValueError:
            problems.append(f"{where} name {name!r} is not a normalized relative path")
        if not isinstance(entry, dict) or not is_valid_hex(entry.get("sha256")):
            problems.append(f"{where}[{name}] has a malformed sha256 digest")
    return problems


def validate_link_schema(doc: Any) -> list[str]:
    if not isinstance(doc, dict):
        return ["link must be a JSON object"]
    problems = []
    for key in ("_type", "name", "command", "materials", "products", "byproducts", "environment"):
        if key not in doc:
            problems.append(f"missing field {key}")
    if problems:
        return problems
    if doc["_type"] != "link":
        problems.append("_type must be 'link'")
    if not isinstance(doc["name"], str):
        problems.append("name must be a string")
    if not isinstance(doc["command"], list) or not all(isinstance(c, str) for c in doc["command"]):
        problems.append("command must be a list of strings")
    problems += _check_digest_map(doc["materials"], "materials")
    problems += _check_digest_map(doc["products"], "products")
    if isinstance(doc["materials"], dict) and isinstance(doc["products"], dict):
        overlap = set(doc["materials"]) & set(doc["products"])
        if overlap:
            problems.append(f"materials and products overlap: {sorted(overlap)}")
    bp = doc["byproducts"]
    if not isinstance(bp, dict):
        problems.append("byproducts must be an object")
    else:
        if not isinstance(bp.get("return_code"), int) or isinstance(bp.get("return_code"), bool):
            problems.append("byproducts.return_code must be an integer")
        if not isinstance(bp.get("duration_seconds"), str):
            problems.append("byproducts.duration_seconds must be a decimal string")
    try:
        EnvironmentSnapshot.from_dict(doc["environment"])
    except (KeyError, TypeError, ValueError) as exc:
        problems.append(f"environment is malformed: {exc}")
    return problems


SCHEMAS[LINK_PAYLOAD_TYPE] = validate_link_schema


# ---------------------------------------------------------------------------
# verification


class MatchStatus(str, enum.Enum):
    MATCH = "MATCH"
    MISMATCH = "MISMATCH"
    UNKNOWN_NAME = "UNKNOWN_NAME"
    MISSING = "MISSING"  # referenced object absent from storage


@dataclass(frozen=True)
class MatchResult:
    status: MatchStatus
    name: str
    expected: str | None = None
    actual: str | None = None

    @property
    def ok(self) -> bool:
        return self.status is MatchStatus.MATCH

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status.value,
            "name": self.name,
            "expected": self.expected,
            "actual": self.actual,
        }


def verify_artifact_against_link(link: LinkFile, name: str, data: bytes) -> MatchResult:
    expected = link.lookup(name)
    if expected is None:
        return MatchResult(MatchStatus.UNKNOWN_NAME, name)
    actual = compute_digest(data)
    status = MatchStatus.MATCH if actual.hex == expected.hex else MatchStatus.MISMATCH
    return MatchResult(status, name, expected.hex, actual.hex)


def verify_link(env: SignedEnvelope, public_key: bytes) -> VerificationReport:
    """Signature, single-step layout and artifact-rule checks for a link envelope."""
    report = verify_envelope(env, public_key, schema=validate_link_schema)

    functionary = key_id_for(public_key)
    layout: list[str] = []
    if env.payload_type != LINK_PAYLOAD_TYPE:
        layout.append(f"payload_type {env.payload_type!r} is not a link")
    if env.signatures and not any(s.key_id == functionary for s in env.signatures):
        layout.append("no signature from the platform functionary key")

    link: LinkFile | None = None
    if report.checks["schema_valid"].passed:
        link = LinkFile.from_envelope(env)
        if link.step_name != STEP_NAME:
            layout.append(f"step {link.step_name!r} is not in the layout")
        if tuple(link.command[: len(PIPELINE_PROGRAM)]) != PIPELINE_PROGRAM or link.job_id is None:
            layout.append("command is not the enforced training pipeline")
    else:
        layout.append("link payload does not match the schema")
    report.add("layout_valid", not layout, "; ".join(layout))

    rules: list[str] = []
    if link is not None:
        if DATASET_NAME not in link.materials:
            rules.append(f"material {DATASET_NAME} missing")
        for required in (MODEL_NAME, METRICS_NAME):
            if required not in link.products:
                rules.append(f"product {required} missing")
        allowed_materials = {DATASET_NAME, BASE_MODEL_NAME}
        allowed_products = {MODEL_NAME, METRICS_NAME, LOG_NAME}
        extra = (set(link.materials) - allowed_materials) | (set(link.products) - allowed_products)
        if extra:
            rules.append(f"artifacts outside the layout: {sorted(extra)}")
        if link.byproducts.get("return_code") != 0:
            rules.append("step did not exit cleanly")
    else:
        rules.append("artifact rules not evaluated")
    report.add("artifact_rules", not rules, "; ".join(rules))
    return report
