from __future__ import annotations

import json
import time
from pathlib import Path

import pytest

from verifiable_training.api.openapi import render
from verifiable_training.attestation import METRICS_NAME, MODEL_NAME, aibom_name, link_name
from verifiable_training.core import canonical_parse, canonical_serialize, compute_digest
from verifiable_training.signing import key_id_for
from verifiable_training.tamper_harness import OTHER_TOKEN, Harness, code_bearing_fields, regression_csv

DOCS = Path(__file__).resolve().parents[1] / "docs"
CONFIG = {"epochs": 3, "batch_size": 8, "learning_rate": 0.05}


class TestAuth:
    def test_missing_token(self, harness):
        r = harness.client.post("/v1/jobs", json={"dataset": "0" * 64, "config": CONFIG})
        assert r.status_code == 401

    def test_unknown_token(self, harness):
        r = harness.client.get("/v1/jobs/x", headers=Harness.auth("not-a-token"))
        assert r.status_code == 401

    def test_other_users_job(self, shared_harness):
        r = shared_harness.client.get(f"/v1/jobs/{shared_harness.job.job_id}", headers=Harness.auth(OTHER_TOKEN))
        assert r.status_code == 403
        r = shared_harness.client.get(
            f"/v1/jobs/{shared_harness.job.job_id}/artifacts", headers=Harness.auth(OTHER_TOKEN)
        )
        assert r.status_code == 403

    def test_unknown_job(self, shared_harness):
        assert shared_harness.client.get("/v1/jobs/nope", headers=Harness.auth()).status_code == 404

    def test_verification_is_public(self, shared_harness):
        r = shared_harness.client.post("/v1/verify/link", content=shared_harness.job.link)
        assert r.status_code == 200 and r.json()["passed"]


class TestSubmit:
    def test_negative_epochs(self, harness):
        digest = harness.upload(regression_csv())
        r = harness.client.post(
            "/v1/jobs", json={"dataset": digest, "config": {**CONFIG, "epochs": -1}}, headers=Harness.auth()
        )
        assert r.status_code == 422
        assert r.json()["field"] == "epochs"

    def test_unknown_dataset(self, harness):
        r = harness.client.post("/v1/jobs", json={"dataset": "a" * 64, "config": CONFIG}, headers=Harness.auth())
        assert r.status_code == 422 and r.json()["field"] == "dataset"

    def test_other_users_upload_is_not_visible(self, harness):
        digest = harness.upload(regression_csv())
        r = harness.client.post("/v1/jobs", json={"dataset": digest, "config": CONFIG}, headers=Harness.auth(OTHER_TOKEN))
        assert r.status_code == 422

    def test_malformed_csv_rejected_at_submit(self, harness):
        digest = harness.upload(b"only-one-column\n1\n")
        r = harness.client.post("/v1/jobs", json={"dataset": digest, "config": CONFIG}, headers=Harness.auth())
        assert r.status_code == 422 and r.json()["field"] == "dataset"

    def test_extra_code_field_is_not_executed(self, harness):
        digest = harness.upload(regression_csv())
        body = {"dataset": digest, "config": CONFIG, "command": "rm -rf /"}
        r = harness.client.post("/v1/jobs", json=body, headers=Harness.auth())
        assert r.status_code == 201
        assert "command" not in r.json()["spec"]

    def test_responses_are_canonical(self, harness):
        digest = harness.upload(regression_csv())
        r = harness.client.post("/v1/jobs", json={"dataset": digest, "config": CONFIG}, headers=Harness.auth())
        assert r.content == canonical_serialize(canonical_parse(r.content))


def test_happy_path(harness):
    data = regression_csv()
    up = harness.client.post("/v1/artifacts", files={"file": ("d.csv", data, "text/csv")}, headers=Harness.auth())
    assert up.status_code == 201 and up.json()["digest"]["hex"] == compute_digest(data).hex
    job_id = harness.submit(up.json()["digest"]["hex"], epochs=3)
    assert harness.status(job_id)["state"] == "SUBMITTED"
    harness.platform.worker.drain()
    status = harness.status(job_id)
    assert status["state"] == "COMPLETED" and status["attempt"] == 1
    files = harness.fetch(job_id)
    assert set(files) == {MODEL_NAME, METRICS_NAME, link_name(job_id), aibom_name(job_id)}
    link = files[link_name(job_id)]
    assert harness.verify_link(link)["passed"]
    storage = harness.verify_storage(link)
    assert storage["passed"] and all(r["status"] == "MATCH" for r in storage["results"])
    assert harness.verify_aibom(files[aibom_name(job_id)])["passed"]


class TestVerifyEndpoints:
    def test_hash_match(self, shared_harness):
        job = shared_harness.job
        r = shared_harness.client.post(
            "/v1/verify/hash",
            files={"link": ("l", job.link), "artifact": ("m", job.files[MODEL_NAME])},
            data={"name": MODEL_NAME},
        )
        assert r.json()["status"] == "MATCH"

    def test_hash_mismatch_reports_digests(self, shared_harness):
        job = shared_harness.job
        mutated = bytearray(job.files[MODEL_NAME])
        mutated[-1] ^= 1
        r = shared_harness.client.post(
            "/v1/verify/hash",
            files={"link": ("l", job.link), "artifact": ("m", bytes(mutated))},
            data={"name": MODEL_NAME},
        )
        body = r.json()
        assert body["status"] == "MISMATCH"
        assert body["expected"] == compute_digest(job.files[MODEL_NAME]).hex
        assert body["actual"] == compute_digest(bytes(mutated)).hex

    def test_hash_unknown_name(self, shared_harness):
        job = shared_harness.job
        r = shared_harness.client.post(
            "/v1/verify/hash", files={"link": ("l", job.link), "artifact": ("m", b"x")}, data={"name": "nope.bin"}
        )
        assert r.json()["status"] == "UNKNOWN_NAME"

    @pytest.mark.parametrize("path", ["/v1/verify/link", "/v1/verify/aibom", "/v1/verify/storage"])
    @pytest.mark.parametrize("body", [b"", b"not json", b"[1,2]", b'{"payload": 3}'])
    def test_malformed_bodies_are_400(self, shared_harness, path, body):
        r = shared_harness.client.post(path, content=body)
        if path == "/v1/verify/aibom" and body.startswith(b"{"):
            # any JSON object is a candidate AIBOM; it simply fails every check
            assert r.status_code == 200 and r.json()["passed"] is False
        else:
            assert r.status_code == 400

    def test_verification_is_pure(self, shared_harness):
        job = shared_harness.job
        before = sorted(p.read_bytes() for p in shared_harness.platform.storage.root.rglob("*") if p.is_file())
        reports = [
            (
                shared_harness.client.post("/v1/verify/aibom", content=job.aibom).content,
                shared_harness.client.post("/v1/verify/storage", content=job.link).content,
            )
            for _ in range(3)
        ]
        after = sorted(p.read_bytes() for p in shared_harness.platform.storage.root.rglob("*") if p.is_file())
        assert len(set(reports)) == 1 and before == after

    def test_public_key(self, shared_harness):
        r = shared_harness.client.get("/v1/keys/public")
        assert r.status_code == 200
        assert r.content.startswith(b"-----BEGIN PUBLIC KEY-----")
        assert r.headers["X-Key-Id"] == key_id_for(r.content)


class TestGrants:
    def listing(self, h):
        return h.client.get(f"/v1/jobs/{h.job.job_id}/artifacts", headers=Harness.auth()).json()

    def test_expired_grant(self, shared_harness, monkeypatch):
        entry = self.listing(shared_harness)[0]
        monkeypatch.setattr(shared_harness.platform.storage, "clock", lambda: time.time() + 10**6)
        assert shared_harness.client.get(entry["url"]).status_code == 410

    def test_tampered_grant(self, shared_harness):
        entry = self.listing(shared_harness)[0]
        url = entry["url"].replace(f"expires={entry['expires']}", f"expires={entry['expires'] + 1}")
        assert shared_harness.client.get(url).status_code == 403

    def test_pending_job_has_no_artifacts(self, harness):
        job_id = harness.submit(harness.upload(regression_csv()))
        assert harness.client.get(f"/v1/jobs/{job_id}/artifacts", headers=Harness.auth()).json() == []


class TestSchema:
    def test_no_code_bearing_fields(self, shared_harness):
        assert code_bearing_fields(shared_harness.client.get("/openapi.json").json()) == []

    def test_detector_would_flag_a_code_field(self):
        doc = {"components": {"schemas": {"X": {"properties": {"pre_train_script": {}, "epochs": {}}}}}}
        assert len(code_bearing_fields(doc)) == 1

    def test_docs_openapi_is_current(self):
        assert json.loads((DOCS / "openapi.json").read_text()) == json.loads(render())

    def test_writable_routes(self, shared_harness):
        paths = shared_harness.client.get("/openapi.json").json()["paths"]
        job_writes = [p for p, ops in paths.items() if "post" in ops and not p.startswith("/v1/verify/")]
        assert sorted(job_writes) == ["/v1/artifacts", "/v1/jobs"]
