from __future__ import annotations

import random
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

from verifiable_training.core import ArtifactRef, JobRecord, JobSpec, JobState, TrainingConfig, compute_digest
from verifiable_training.signing import KeyPair
from verifiable_training.storage import ObjectStore
from verifiable_training.tamper_harness import Harness, regression_csv


class FakeClock:
    """Manually advanced UTC clock shared by orchestrator and storage tests."""

    def __init__(self, start: datetime | None = None) -> None:
        self.now = start or datetime(2030, 1, 1, tzinfo=timezone.utc)

    def __call__(self) -> datetime:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += timedelta(seconds=seconds)

    def epoch(self) -> float:
        return self.now.timestamp()


@pytest.fixture(scope="session")
def key() -> KeyPair:
    return KeyPair.generate()


@pytest.fixture(scope="session")
def other_key() -> KeyPair:
    return KeyPair.generate()


@pytest.fixture
def clock() -> FakeClock:
    return FakeClock()


@pytest.fixture
def store(tmp_path: Path) -> ObjectStore:
    return ObjectStore(tmp_path / "store")


@pytest.fixture
def harness(tmp_path: Path):
    with Harness(tmp_path / "platform") as h:
        yield h


@pytest.fixture(scope="module")
def shared_harness(tmp_path_factory):
    """One completed job reused by read-only tests in a module."""
    with Harness(tmp_path_factory.mktemp("platform")) as h:
        h.job = h.completed_job()
        yield h


def csv_bytes(n_rows: int = 30, seed: int = 3) -> bytes:
    return regression_csv(n_rows, seed)


def make_spec(submitter: str = "alice", data: bytes = b"x,y\n1,2\n", **config) -> JobSpec:
    cfg = {"epochs": 3, "batch_size": 8, "learning_rate": 0.05, **config}
    ref = ArtifactRef("dataset.csv", compute_digest(data), len(data), "text/csv")
    return JobSpec(dataset=ref, config=TrainingConfig(**cfg), submitter=submitter)


def running_record(job_id: str = "job-1", outputs: tuple[ArtifactRef, ...] = ()) -> JobRecord:
    now = datetime(2030, 1, 1, tzinfo=timezone.utc)
    return JobRecord(
        job_id=job_id,
        spec=make_spec(),
        state=JobState.RUNNING,
        created_at=now,
        started_at=now,
        outputs=outputs,
        attempt=1,
    )


def ref_for(name: str, data: bytes, media_type: str = "application/octet-stream") -> ArtifactRef:
    return ArtifactRef(name, compute_digest(data), len(data), media_type)


def flip_random_bit(data: bytes, rng: random.Random) -> bytes:
    buf = bytearray(data)
    i = rng.randrange(len(buf))
    buf[i] ^= 1 << rng.randrange(8)
    return bytes(buf)
