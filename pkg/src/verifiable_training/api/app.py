"""FastAPI gateway: job endpoints for engineers, verification endpoints for anyone."""

from __future__ import annotations

import logging
from contextlib import asynccontextmanager
from typing import Any, Optional

from fastapi import Depends, FastAPI, File, Form, Header, Request, UploadFile
from fastapi.responses import JSONResponse, Response

from ..core import Task, TrainingConfig, canonical_serialize
from ..errors import (
    GrantExpired,
    IntegrityError,
    InvalidToken,
    MissingAttestation,
    NonCanonicalizable,
    NotFound,
    NotOwner,
    PlatformError,
    StaleLease,
    Unauthorized,
    ValidationFailed,
)
from ..service import Platform, Settings
from ..signing import key_id_for
from ..storage import AccessGrant, ObjectKey
from . import schemas

log = logging.getLogger(__name__)

RAW_JSON_BODY = {
    "requestBody": {
        "required": True,
        "content": {"application/json": {"schema": {"type": "object"}}},
    }
}


class CanonicalJSONResponse(JSONResponse):
    """JSON responses in the same canonical byte form used for signing."""

    def render(self, content: Any) -> bytes:
        return canonical_serialize(content)


class HTTPProblem(Exception):
    def __init__(self, status: int, detail: str, field: str | None = None) -> None:
        self.status = status
        self.detail = detail
        self.field = field


def _problem(status: int, detail: str, field: str | None = None) -> CanonicalJSONResponse:
    body: dict[str, Any] = {"detail": detail}
    if field is not None:
        body["field"] = field
    return CanonicalJSONResponse(body, status_code=status)


_STATUS = [
    (NonCanonicalizable, 400),
    (ValidationFailed, 422),
    (MissingAttestation, 409),
    (StaleLease, 409),
    (IntegrityError, 409),
    (Unauthorized, 403),
    (NotOwner, 403),
    (InvalidToken, 403),
    (GrantExpired, 410),
    (NotFound, 404),
]


def create_app(platform: Platform, *, run_background: bool = False) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if run_background:
            platform.start_background()
        try:
            yield
        finally:
            if run_background:
                platform.stop_background()

    app = FastAPI(
        title="Verifiable training gateway",
        version="0.1.0",
        default_response_class=CanonicalJSONResponse,
        lifespan=lifespan,
    )
    app.state.platform = platform

    @app.exception_handler(HTTPProblem)
    async def _http_problem(request: Request, exc: HTTPProblem):
        return _problem(exc.status, exc.detail, exc.field)

    @app.exception_handler(PlatformError)
    async def _platform_error(request: Request, exc: PlatformError):
        for cls, status in _STATUS:
            if isinstance(exc, cls):
                return _problem(status, str(exc), getattr(exc, "field", None))
        log.exception("unhandled platform error", exc_info=exc)
        return _problem(500, str(exc))

    @app.exception_handler(ValueError)
    async def _bad_request(request: Request, exc: ValueError):
        return _problem(400, f"malformed request: {exc}")

    def principal(authorization: Optional[str] = Header(default=None)) -> str:
        if not authorization or not authorization.lower().startswith("bearer "):
            raise HTTPProblem(401, "missing bearer token")
        subject = platform.authenticate(authorization[7:].strip())
        if subject is None:
            raise HTTPProblem(401, "invalid bearer token")
        return subject

    # -- engineer endpoints --------------------------------------------------

    @app.post("/v1/artifacts", response_model=schemas.ArtifactRefModel, status_code=201)
    async def upload_artifact(file: UploadFile = File(...), who: str = Depends(principal)):
        data = await file.read()
        ref = platform.upload(who, data, file.content_type or "application/octet-stream")
        return ref.to_dict()

    @app.post("/v1/jobs", response_model=schemas.JobRecordModel, status_code=201)
    def submit_job(body: schemas.JobSubmitRequest, who: str = Depends(principal)):
        cfg = body.config
        config = TrainingConfig(
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            learning_rate=cfg.learning_rate,
            task=Task(cfg.task),
            seed=cfg.seed,
            framework_tag=cfg.framework_tag,
        )
        return platform.submit(who, body.dataset, config, body.base_model).to_dict()

    @app.get("/v1/jobs/{job_id}", response_model=schemas.JobRecordModel)
    def job_status(job_id: str, who: str = Depends(principal)):
        return platform.orchestrator.job_status(job_id, who).to_dict()

    @app.get("/v1/jobs/{job_id}/artifacts", response_model=list[schemas.ArtifactGrantModel])
    def job_artifacts(job_id: str, request: Request, who: str = Depends(principal)):
        base = str(request.base_url).rstrip("/")
        return [
            {"artifact": ref.to_dict(), "url": grant.url(base), "expires": grant.expires}
            for ref, grant in platform.job_artifacts(job_id, who)
        ]

    @app.get(
        "/v1/objects/{job_id}/{name:path}",
        response_class=Response,
        responses={200: {"content": {"application/octet-stream": {}}}},
    )
    def download(job_id: str, name: str, expires: int, token: str):
        grant = AccessGrant(ObjectKey(job_id, name), expires, token)
        data = platform.storage.redeem_grant(grant)
        return Response(data, media_type=platform.storage.stat(grant.key).media_type)

    # -- verifier endpoints (public, read-only) ------------------------------

    @app.get("/v1/keys/public", response_class=Response, responses={200: {"content": {"application/x-pem-file": {}}}})
    def public_key():
        return Response(
            platform.public_key,
            media_type="application/x-pem-file",
            headers={"X-Key-Id": key_id_for(platform.public_key)},
        )

    @app.post("/v1/verify/aibom", response_model=schemas.VerificationReportModel, openapi_extra=RAW_JSON_BODY)
    async def verify_aibom(request: Request):
        return platform.verify_aibom_bytes(await request.body()).to_dict()

    @app.post("/v1/verify/link", response_model=schemas.VerificationReportModel, openapi_extra=RAW_JSON_BODY)
    async def verify_link(request: Request):
        return platform.verify_link_bytes(await request.body()).to_dict()

    @app.post("/v1/verify/hash", response_model=schemas.MatchResultModel)
    async def verify_hash(link: UploadFile = File(...), artifact: UploadFile = File(...), name: str = Form(...)):
        return platform.verify_hash(await link.read(), name, await artifact.read()).to_dict()

    @app.post("/v1/verify/storage", response_model=schemas.StorageVerificationModel, openapi_extra=RAW_JSON_BODY)
    async def verify_storage(request: Request):
        return platform.verify_storage(await request.body()).to_dict()

    return app


def create_app_from_env() -> FastAPI:
    """uvicorn factory: ``uvicorn --factory verifiable_training.api.app:create_app_from_env``."""
    return create_app(Platform(Settings.from_env()), run_background=True)


__all__ = ["CanonicalJSONResponse", "create_app", "create_app_from_env"]
