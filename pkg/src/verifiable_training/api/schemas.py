"""Request and response bodies of the HTTP gateway.

None of these models carries a field that is executed or interpreted as
code: users send data (files) and numeric training parameters only.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

HEX64 = r"^[0-9a-f]{64}$"


class DigestModel(BaseModel):
    algorithm: Literal["sha256"] = "sha256"
    hex: str = Field(pattern=HEX64)


class ArtifactRefModel(BaseModel):
    name: str
    digest: DigestModel
    size_bytes: int
    media_type: str


class TrainingConfigModel(BaseModel):
    epochs: int
    batch_size: int
    learning_rate: float
    task: Literal["regression", "classification"] = "regression"
    seed: int = 0
    framework_tag: str = "reftrainer/1"


class JobSubmitRequest(BaseModel):
    dataset: str = Field(pattern=HEX64, description="sha256 of a dataset previously uploaded via /v1/artifacts")
    base_model: Optional[str] = Field(default=None, pattern=HEX64)
    config: TrainingConfigModel


class JobSpecModel(BaseModel):
    dataset: ArtifactRefModel
    base_model: Optional[ArtifactRefModel] = None
    config: TrainingConfigModel
    submitter: str


class TrainingMetricsModel(BaseModel):
    final_loss: Optional[float] = None
    loss_per_epoch: list[float]
    duration_seconds: float
    aibom_generation_seconds: float


class JobRecordModel(BaseModel):
    job_id: str
    spec: JobSpecModel
    state: Literal["SUBMITTED", "RUNNING", "COMPLETED", "FAILED"]
    created_at: str
    started_at: Optional[str] = None
    finished_at: Optional[str] = None
    outputs: list[ArtifactRefModel]
    failure_reason: Optional[str] = None
    attempt: int
    metrics: Optional[TrainingMetricsModel] = None


class ArtifactGrantModel(BaseModel):
    artifact: ArtifactRefModel
    url: str
    expires: int


class CheckModel(BaseModel):
    passed: bool
    detail: str = ""


class VerificationReportModel(BaseModel):
    passed: bool
    checks: dict[str, CheckModel]
    reasons: list[str]


class MatchResultModel(BaseModel):
    status: Literal["MATCH", "MISMATCH", "UNKNOWN_NAME", "MISSING"]
    name: str
    expected: Optional[str] = None
    actual: Optional[str] = None


class StorageVerificationModel(BaseModel):
    passed: bool
    signature: VerificationReportModel
    results: list[MatchResultModel]


class ErrorModel(BaseModel):
    detail: str
    field: Optional[str] = None
