"""Ed25519 platform keys and DSSE-style signed envelopes.

The signature covers the pre-authentication encoding

    b"DSSEv1" SP len(payload_type) SP payload_type SP len(payload) SP payload

with lengths in ASCII decimal, so a payload can never be reinterpreted under
a different payload type.
"""

from __future__ import annotations

import base64
import binascii
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .core import canonical_parse, canonical_serialize, compute_digest, is_canonical
from .errors import KeyUnavailable

LINK_PAYLOAD_TYPE = "application/vnd.aibomgen.link+json"
AIBOM_PAYLOAD_TYPE = "application/vnd.aibomgen.aibom+json"
SIGNATURE_ALGORITHM = "Ed25519"

# payload_type -> callable returning a list of schema violations
SCHEMAS: dict[str, Callable[[Any], list[str]]] = {}


def pae(payload_type: str, payload: bytes) -> bytes:
    t = payload_type.encode("utf-8")
    return b"DSSEv1 %d %s %d %s" % (len(t), t, len(payload), payload)


def _public_pem(public_key: Ed25519PublicKey) -> bytes:
    return public_key.public_bytes(
        encoding=serialization.Encoding.PEM,
        format=serialization.PublicFormat.SubjectPublicKeyInfo,
    )


def key_id_for(public_pem: bytes) -> str:
    return compute_digest(public_pem).hex


def load_public_key(public_pem: bytes | str) -> Ed25519PublicKey:
    if isinstance(public_pem, str):
        public_pem = public_pem.encode("ascii")
    try:
        key = serialization.load_pem_public_key(public_pem)
    except (ValueError, TypeError) as exc:
        raise KeyUnavailable(f"unreadable public key: {exc}") from exc
    if not isinstance(key, Ed25519PublicKey):
        raise KeyUnavailable("public key is not Ed25519")
    return key


@dataclass(frozen=True)
class KeyPair:
    """Platform signing key. ``private_key`` never leaves this object."""

    public_key: bytes
    private_key: Ed25519PrivateKey = field(repr=False)

    @property
    def key_id(self) -> str:
        return key_id_for(self.public_key)

    @classmethod
    def generate(cls) -> KeyPair:
        priv = Ed25519PrivateKey.generate()
        return cls(public_key=_public_pem(priv.public_key()), private_key=priv)

    @classmethod
    def from_private_pem(cls, data: bytes) -> KeyPair:
        try:
            priv = serialization.load_pem_private_key(data, password=None)
        except (ValueError, TypeError) as exc:
            raise KeyUnavailable(f"unreadable signing key: {exc}") from exc
        if not isinstance(priv, Ed25519PrivateKey):
            raise KeyUnavailable("signing key is not Ed25519")
        return cls(public_key=_public_pem(priv.public_key()), private_key=priv)

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> KeyPair:
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise KeyUnavailable(f"cannot read signing key {path}: {exc}") from exc
        return cls.from_private_pem(data)

    def private_pem(self) -> bytes:
        return self.private_key.private_bytes(
            encoding=serialization.Encoding.PEM,
            format=serialization.PrivateFormat.PKCS8,
            encryption_algorithm=serialization.NoEncryption(),
        )

    def save(self, private_path: str | os.PathLike[str], public_path: str | os.PathLike[str]) -> None:
        private_path = Path(private_path)
        private_path.write_bytes(self.private_pem())
        os.chmod(private_path, 0o600)
        Path(public_path).write_bytes(self.public_key)

    def sign(self, message: bytes) -> bytes:
        return self.private_key.sign(message)


def verify_signature(public_pem: bytes, message: bytes, signature: bytes) -> bool:
    try:
        load_public_key(public_pem).verify(signature, message)
    except (InvalidSignature, KeyUnavailable):
        return False
    return True


# ---------------------------------------------------------------------------
# verification reports


@dataclass
class Check:
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "detail": self.detail}


@dataclass
class VerificationReport:
    checks: dict[str, Check] = field(default_factory=dict)

    def add(self, name: str, passed: bool, detail: str = "") -> bool:
        self.checks[name] = Check(bool(passed), detail)
        return bool(passed)

    def merge(self, other: VerificationReport, prefix: str = "") -> None:
        for name, check in other.checks.items():
            self.checks[prefix + name] = check

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks.values())

    @property
    def reasons(self) -> list[str]:
        return [f"{n}: {c.detail}" if c.detail else n for n, c in self.checks.items() if not c.passed]

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "checks": {n: c.to_dict() for n, c in self.checks.items()},
            "reasons": self.reasons,
        }


# ---------------------------------------------------------------------------
# envelopes


@dataclass(frozen=True)
class EnvelopeSignature:
    key_id: str
    signature: str  # base64

    def to_dict(self) -> dict[str, str]:
        return {"key_id": self.key_id, "signature": self.signature}


@dataclass(frozen=True)
class SignedEnvelope:
    payload_type: str
    payload: bytes
    signatures: tuple[EnvelopeSignature, ...]

    def document(self) -> Any:
        return canonical_parse(self.payload)

    def to_dict(self) -> dict[str, Any]:
        return {
            "payload_type": self.payload_type,
            "payload": base64.b64encode(self.payload).decode("ascii"),
            "signatures": [s.to_dict() for s in self.signatures],
        }

    def to_bytes(self) -> bytes:
        return canonical_serialize(self.to_dict())

    @classmethod
    def from_dict(cls, d: Any) -> SignedEnvelope:
        if not isinstance(d, dict):
            raise ValueError("envelope must be a JSON object")
        try:
            payload_type = d["payload_type"]
            payload = base64.b64decode(d["payload"], validate=True)
            sigs = tuple(
                EnvelopeSignature(key_id=s["key_id"], signature=s["signature"])
                for s in d.get("signatures", [])
            )
        except (KeyError, TypeError, binascii.Error) as exc:
            raise ValueError(f"malformed envelope: {exc}") from exc
        if not isinstance(payload_type, str):
            raise ValueError("malformed envelope: payload_type must be a string")
        return cls(payload_type=payload_type, payload=payload, signatures=sigs)

    @classmethod
    def from_bytes(cls, data: bytes) -> SignedEnvelope:
        try:
            doc = canonical_parse(data)
        except (ValueError, UnicodeDecodeError) as exc:
            raise ValueError(f"envelope is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


def sign_envelope(doc: Any, payload_type: str, key: KeyPair) -> SignedEnvelope:
    payload = canonical_serialize(doc)
    sig = key.sign(pae(payload_type, payload))
    return SignedEnvelope(
        payload_type=payload_type,
        payload=payload,
        signatures=(EnvelopeSignature(key.key_id, base64.b64encode(sig).decode("ascii")),),
    )


def _decode_sig(value: str) -> bytes | None:
    try:
        return base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError, TypeError):
        return None


def verify_envelope(
    env: SignedEnvelope,
    public_key: bytes,
    schema: Callable[[Any], list[str]] | None = None,
) -> VerificationReport:
    """Check signature, canonical payload form and payload schema.

    Never raises for bad input; every problem becomes a failed check.
    """
    report = VerificationReport()
    message = pae(env.payload_type, env.payload)

    if not env.signatures:
        report.add("signature_valid", False, "no signatures")
    else:
        ok = False
        for s in env.signatures:
            raw = _decode_sig(s.signature)
            if raw is not None and verify_signature(public_key, message, raw):
                ok = True
                break
        report.add(
            "signature_valid",
            ok,
            "" if ok else "no signature verifies under the supplied public key",
        )

    canonical = is_canonical(env.payload)
    report.add("payload_canonical", canonical, "" if canonical else "payload is not in canonical form")

    validator = schema or SCHEMAS.get(env.payload_type)
    try:
        doc = canonical_parse(env.payload)
    except (ValueError, UnicodeDecodeError) as exc:
        report.add("schema_valid", False, f"payload does not parse: {exc}")
        return report
    if validator is None:
        report.add("schema_valid", True, f"no schema registered for {env.payload_type}")
    else:
        problems = validator(doc)
        report.add("schema_valid", not problems, "; ".join(problems))
    return report
