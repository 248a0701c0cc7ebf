from __future__ import annotations

import base64
import dataclasses
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from verifiable_training.core import canonical_serialize
from verifiable_training.errors import KeyUnavailable
from verifiable_training.signing import (
    EnvelopeSignature,
    KeyPair,
    SignedEnvelope,
    key_id_for,
    pae,
    sign_envelope,
    verify_envelope,
    verify_signature,
)

from .conftest import flip_random_bit

PT = "application/vnd.example+json"


def test_pae_layout():
    # DSSE pre-authentication encoding, lengths in decimal ASCII
    assert pae("t", b"ab") == b"DSSEv1 1 t 2 ab"
    assert pae("", b"") == b"DSSEv1 0  0 "


class TestKeys:
    def test_sign_verify_round_trip(self, key):
        assert verify_signature(key.public_key, b"msg", key.sign(b"msg"))

    def test_flipped_payload_byte_invalid(self, key):
        sig = key.sign(b"message")
        assert not verify_signature(key.public_key, b"messagf", sig)

    def test_wrong_key_invalid(self, key, other_key):
        assert not verify_signature(other_key.public_key, b"m", key.sign(b"m"))

    def test_garbage_public_key_is_invalid_not_error(self, key):
        assert not verify_signature(b"not a pem", b"m", key.sign(b"m"))

    def test_save_and_load(self, tmp_path, key):
        key.save(tmp_path / "k.pem", tmp_path / "k.pub")
        loaded = KeyPair.load(tmp_path / "k.pem")
        assert loaded.public_key == key.public_key
        assert loaded.key_id == key_id_for((tmp_path / "k.pub").read_bytes())

    def test_missing_key_file(self, tmp_path):
        with pytest.raises(KeyUnavailable):
            KeyPair.load(tmp_path / "absent.pem")

    def test_unreadable_key_material(self, tmp_path):
        (tmp_path / "bad.pem").write_text("garbage")
        with pytest.raises(KeyUnavailable):
            KeyPair.load(tmp_path / "bad.pem")


class TestEnvelope:
    def test_untouched_envelope_passes(self, key):
        env = sign_envelope({"a": 1}, PT, key)
        report = verify_envelope(env, key.public_key)
        assert report.passed, report.reasons
        assert set(report.checks) == {"signature_valid", "payload_canonical", "schema_valid"}

    def test_no_signatures(self, key):
        env = dataclasses.replace(sign_envelope({"a": 1}, PT, key), signatures=())
        report = verify_envelope(env, key.public_key)
        assert not report.passed
        assert report.checks["signature_valid"].detail == "no signatures"

    def test_reordered_payload_fails_canonical_check(self, key):
        env = sign_envelope({"a": 1, "b": 2}, PT, key)
        swapped = dataclasses.replace(env, payload=b'{"b":2,"a":1}')
        report = verify_envelope(swapped, key.public_key)
        assert not report.checks["payload_canonical"].passed
        assert not report.passed

    def test_non_canonical_payload_fails_even_when_signed(self, key):
        payload = b'{"b": 2, "a": 1}'
        sig = base64.b64encode(key.sign(pae(PT, payload))).decode()
        env = SignedEnvelope(PT, payload, (EnvelopeSignature(key.key_id, sig),))
        report = verify_envelope(env, key.public_key)
        assert report.checks["signature_valid"].passed
        assert not report.checks["payload_canonical"].passed

    def test_payload_type_is_bound(self, key):
        env = sign_envelope({"a": 1}, PT, key)
        retyped = dataclasses.replace(env, payload_type="application/other+json")
        assert not verify_envelope(retyped, key.public_key).checks["signature_valid"].passed

    def test_wrong_key(self, key, other_key):
        env = sign_envelope({"a": 1}, PT, key)
        assert not verify_envelope(env, other_key.public_key).passed

    def test_second_signature_from_right_key_is_enough(self, key, other_key):
        good = sign_envelope({"a": 1}, PT, key)
        foreign = sign_envelope({"a": 1}, PT, other_key)
        env = dataclasses.replace(good, signatures=foreign.signatures + good.signatures)
        assert verify_envelope(env, key.public_key).passed

    def test_schema_hook(self, key):
        env = sign_envelope({"a": 1}, PT, key)
        report = verify_envelope(env, key.public_key, schema=lambda d: ["missing b"] if "b" not in d else [])
        assert report.reasons == ["schema_valid: missing b"]

    def test_bytes_round_trip(self, key):
        env = sign_envelope({"x": [1, 2]}, PT, key)
        assert SignedEnvelope.from_bytes(env.to_bytes()) == env
        assert env.document() == {"x": [1, 2]}

    @pytest.mark.parametrize(
        "raw",
        [b"", b"[]", b"{}", b'{"payload_type":"t"}', b'{"payload_type":1,"payload":""}', b'{"payload_type":"t","payload":"%%%"}'],
    )
    def test_malformed_envelope_bytes(self, raw):
        with pytest.raises(ValueError):
            SignedEnvelope.from_bytes(raw)

    def test_corrupt_base64_signature_fails_cleanly(self, key):
        env = sign_envelope({"a": 1}, PT, key)
        bad = dataclasses.replace(env, signatures=(EnvelopeSignature(key.key_id, "!!notbase64!!"),))
        assert not verify_envelope(bad, key.public_key).passed


json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-10**9, 10**9) | st.text(st.characters(blacklist_categories=("Cs",)), max_size=10),
    lambda c: st.lists(c, max_size=4) | st.dictionaries(st.text(st.characters(blacklist_categories=("Cs",)), max_size=5), c, max_size=4),
    max_leaves=15,
)


@settings(max_examples=60, deadline=None)
@given(doc=json_values, seed=st.integers(0, 2**32))
def test_any_single_bit_flip_breaks_verification(key, doc, seed):
    env = sign_envelope(doc, PT, key)
    assert verify_envelope(env, key.public_key).passed
    rng = random.Random(seed)
    tampered_payload = dataclasses.replace(env, payload=flip_random_bit(env.payload, rng))
    assert not verify_envelope(tampered_payload, key.public_key).passed
    raw_sig = base64.b64decode(env.signatures[0].signature)
    bad_sig = base64.b64encode(flip_random_bit(raw_sig, rng)).decode()
    tampered_sig = dataclasses.replace(env, signatures=(EnvelopeSignature(key.key_id, bad_sig),))
    assert not verify_envelope(tampered_sig, key.public_key).passed


def test_canonical_payload_bytes(key):
    env = sign_envelope({"b": 1, "a": 2}, PT, key)
    assert env.payload == canonical_serialize({"a": 2, "b": 1})
