from __future__ import annotations

import copy
import dataclasses
from datetime import datetime, timezone

import pytest

from verifiable_training.aibom import (
    embed_signature,
    file_components,
    generate_aibom,
    job_id_of,
    link_reference,
    serialize_aibom,
    validate_schema,
    verify_aibom,
)
from verifiable_training.attestation import METRICS_NAME, MODEL_NAME, aibom_name, link_name
from verifiable_training.core import (
    EnvironmentSnapshot,
    TrainingMetrics,
    canonical_parse,
    compute_digest,
)
from verifiable_training.errors import AlreadySigned, IncompleteJob, NotFound
from verifiable_training.storage import ObjectKey
from verifiable_training.tamper_harness import regression_csv

from .conftest import ref_for, running_record

MODEL = b"RTM1" + bytes(24)
METRICS = b'{"final_loss":0.25}'


def snapshot() -> EnvironmentSnapshot:
    t = datetime(2030, 1, 1, tzinfo=timezone.utc)
    return EnvironmentSnapshot(compute_digest(b"image"), "test 1.0", "host", "cpu", 2048, t, t)


def completed_record(with_metrics: bool = True):
    outputs = [ref_for(MODEL_NAME, MODEL)]
    if with_metrics:
        outputs.append(ref_for(METRICS_NAME, METRICS))
    return running_record("job-7", tuple(outputs))


def unsigned_doc(**kw):
    job = completed_record()
    metrics = TrainingMetrics(0.25, (0.5, 0.25), 1.5, 0.0)
    return generate_aibom(job, ref_for(link_name(job.job_id), b"link"), snapshot(), metrics, **kw)


class TestGenerate:
    def test_structure(self):
        doc = unsigned_doc()
        assert doc["bomFormat"] == "CycloneDX"
        assert len(doc["components"]) >= 3
        assert link_reference(doc) == (link_name("job-7"), compute_digest(b"link").hex)
        assert job_id_of(doc) == "job-7"
        assert doc["metadata"]["component"]["name"] == MODEL_NAME
        assert validate_schema(doc) == []

    def test_file_components_cover_dataset_model_metrics(self):
        names = set(file_components(unsigned_doc()))
        assert {"dataset.csv", MODEL_NAME, METRICS_NAME} <= names
        assert "worker-image" not in names

    def test_missing_metrics(self):
        job = completed_record(with_metrics=False)
        with pytest.raises(IncompleteJob):
            generate_aibom(job, ref_for("l", b"l"), snapshot(), TrainingMetrics(None, (), 0.0))

    def test_scan_summary_becomes_properties(self):
        props = {p["name"]: p["value"] for p in unsigned_doc(scan_summary={"HIGH": 1})["properties"]}
        assert props["scan:findings:HIGH"] == "1"

    def test_two_generations_differ_only_in_serial_and_timestamp(self):
        a, b = unsigned_doc(), unsigned_doc()
        assert a["serialNumber"] != b["serialNumber"]
        for d in (a, b):
            d.pop("serialNumber")
            d["metadata"].pop("timestamp")
        assert a == b

    def test_signed_properties_have_no_raw_floats(self):
        for p in unsigned_doc()["properties"]:
            assert isinstance(p["value"], str)


class TestSignature:
    def test_sign_then_verify_signature(self, key):
        doc = embed_signature(unsigned_doc(), key)
        report = verify_aibom(doc, key.public_key, None)
        assert report.checks["aibom_signature_valid"].passed
        assert report.checks["schema_valid"].passed

    def test_sign_twice(self, key):
        with pytest.raises(AlreadySigned):
            embed_signature(embed_signature(unsigned_doc(), key), key)

    def test_mutated_property_fails(self, key):
        doc = embed_signature(unsigned_doc(), key)
        doc["properties"][2]["value"] = "classification"
        assert not verify_aibom(doc, key.public_key, None).checks["aibom_signature_valid"].passed

    def test_wrong_key(self, key, other_key):
        doc = embed_signature(unsigned_doc(), other_key)
        assert not verify_aibom(doc, key.public_key, None).checks["aibom_signature_valid"].passed

    def test_unsigned_document(self, key):
        detail = verify_aibom(unsigned_doc(), key.public_key, None).checks["aibom_signature_valid"].detail
        assert detail == "document is unsigned"

    def test_serialization_is_canonical(self, key):
        doc = embed_signature(unsigned_doc(), key)
        data = serialize_aibom(doc)
        assert canonical_parse(data) == doc


class TestSchema:
    def test_fresh_document_valid(self, key):
        assert validate_schema(embed_signature(unsigned_doc(), key)) == []

    def test_missing_spec_version(self):
        doc = unsigned_doc()
        del doc["specVersion"]
        problems = validate_schema(doc)
        assert len(problems) == 1 and "specVersion" in problems[0]

    def test_malformed_component_digest_names_component(self):
        doc = unsigned_doc()
        doc["components"][0]["hashes"][0]["content"] = "xyz"
        problems = validate_schema(doc)
        assert len(problems) == 1 and "dataset.csv" in problems[0]

    def test_unknown_top_level_key(self):
        doc = unsigned_doc()
        doc["command"] = "rm -rf /"
        assert validate_schema(doc) != []

    def test_not_an_object(self):
        assert validate_schema([]) != []


@pytest.fixture(scope="module")
def bundle(shared_harness):
    h = shared_harness
    job = h.job
    storage = h.platform.storage

    def resolver(name: str) -> bytes:
        return storage.read_raw(ObjectKey(job.job_id, name))

    return h, job, resolver


class TestVerifyBundle:
    def test_fully_consistent(self, bundle):
        h, job, resolver = bundle
        report = verify_aibom(job.aibom, h.platform.public_key, job.link, resolver)
        assert report.passed, report.reasons
        assert set(report.checks) == {
            "schema_valid",
            "aibom_signature_valid",
            "link_reference_digest_matches",
            "link_envelope_valid",
            "components_match_link",
            "all_artifacts_match",
        }

    def test_substituted_link(self, bundle, tmp_path):
        h, job, _ = bundle
        other = h.completed_job(regression_csv(seed=77))
        report = verify_aibom(job.aibom, h.platform.public_key, other.link)
        assert not report.checks["link_reference_digest_matches"].passed
        assert report.checks["link_envelope_valid"].passed  # it is a genuine link, just not this one

    def test_tampered_model_named(self, bundle):
        h, job, resolver = bundle

        def tampered(name: str) -> bytes:
            data = resolver(name)
            return data[:-1] + bytes([data[-1] ^ 1]) if name == MODEL_NAME else data

        report = verify_aibom(job.aibom, h.platform.public_key, job.link, tampered)
        check = report.checks["all_artifacts_match"]
        assert not check.passed and MODEL_NAME in check.detail
        assert report.reasons == [f"all_artifacts_match: {check.detail}"]

    def test_missing_artifact_does_not_raise(self, bundle):
        h, job, resolver = bundle

        def missing(name: str) -> bytes:
            if name == METRICS_NAME:
                raise NotFound(name)
            return resolver(name)

        report = verify_aibom(job.aibom, h.platform.public_key, job.link, missing)
        assert METRICS_NAME in report.checks["all_artifacts_match"].detail

    def test_link_missing(self, bundle):
        h, job, _ = bundle
        report = verify_aibom(job.aibom, h.platform.public_key, None)
        assert not report.passed
        assert link_name(job.job_id) in report.checks["link_reference_digest_matches"].detail

    def test_component_digest_disagrees_with_link(self, bundle, key):
        h, job, _ = bundle
        doc = canonical_parse(job.aibom)
        doc.pop("signature")
        doc["metadata"]["component"]["hashes"][0]["content"] = compute_digest(b"forged").hex
        report = verify_aibom(doc, h.platform.public_key, job.link)
        assert not report.checks["components_match_link"].passed
        assert not report.checks["aibom_signature_valid"].passed

    def test_bytes_input_and_garbage(self, bundle):
        h, job, _ = bundle
        assert verify_aibom(job.aibom, h.platform.public_key, job.link).passed
        assert not verify_aibom(b"{not json", h.platform.public_key, job.link).passed

    def test_stored_aibom_name(self, bundle):
        h, job, _ = bundle
        assert aibom_name(job.job_id) in job.files

    def test_size_is_small(self, bundle):
        _, job, _ = bundle
        assert len(job.aibom) < 64 * 1024


def test_deepcopy_independence(key):
    doc = embed_signature(unsigned_doc(), key)
    clone = copy.deepcopy(doc)
    clone["version"] = 2
    assert verify_aibom(doc, key.public_key, None).checks["aibom_signature_valid"].passed
    assert not verify_aibom(clone, key.public_key, None).checks["aibom_signature_valid"].passed


def test_record_replace_keeps_job_id():
    rec = dataclasses.replace(completed_record(), job_id="job-8")
    doc = generate_aibom(rec, ref_for(link_name("job-8"), b"l"), snapshot(), TrainingMetrics(0.1, (0.1,), 0.1))
    assert job_id_of(doc) == "job-8"
