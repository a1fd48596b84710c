"""Stateless HTTP front over the shared stores.

Instances keep no per-client state: every read goes to the provenance log,
artifact directory and catalog file, so any number of replicas can serve
the same deployment.
"""

from __future__ import annotations

import json
import uuid
from typing import Any, Optional

from fastapi import FastAPI, Request
from fastapi.responses import Response
from starlette.concurrency import run_in_threadpool

from .errors import (
    EmptyStudySet,
    InvalidPipeline,
    InvalidPolicy,
    MedpipeError,
    NoEligibleSite,
    PipelineSyntaxError,
    PredicateSyntaxError,
    StorageError,
    UnknownActorRef,
    UnknownArtifact,
    UnknownBackend,
    UnknownExecution,
    UnknownMember,
    UnknownPipeline,
    UnknownPlan,
    UnknownPortRef,
    UnknownStudySet,
    UnknownTag,
    UnknownTaskRef,
)
from .service import Services, Settings, error_body
from .util import dumps

STATUS_FOR: list[tuple[type[MedpipeError], int]] = [
    (PredicateSyntaxError, 400),
    (UnknownBackend, 400),
    (UnknownStudySet, 404),
    (UnknownPipeline, 404),
    (UnknownPlan, 404),
    (UnknownExecution, 404),
    (UnknownArtifact, 404),
    (UnknownMember, 404),
    (NoEligibleSite, 409),
    (EmptyStudySet, 409),
    (PipelineSyntaxError, 422),
    (UnknownTaskRef, 422),
    (UnknownActorRef, 422),
    (UnknownPortRef, 422),
    (InvalidPipeline, 422),
    (UnknownTag, 422),
    (InvalidPolicy, 422),
    (StorageError, 503),
]


def status_for(exc: MedpipeError) -> int:
    for cls, code in STATUS_FOR:
        if isinstance(exc, cls):
            return code
    return 400


class _Bad(MedpipeError):
    code = "BAD_REQUEST"


def _json(body: Any, status: int = 200) -> Response:
    return Response(dumps(body), status_code=status, media_type="application/json")


def _error(code: str, message: str, status: int, detail: Any = None) -> Response:
    return _json({"code": code, "message": message, "detail": detail}, status)


async def _body(request: Request) -> dict[str, Any]:
    raw = await request.body()
    if not raw:
        return {}
    try:
        body = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise _Bad(f"request body is not JSON: {exc}") from None
    if not isinstance(body, dict):
        raise _Bad("request body must be a JSON object")
    return body


def create_app(settings: Settings, services: Optional[Services] = None) -> FastAPI:
    svc = services or Services(settings)
    app = FastAPI(title="medpipe gateway", docs_url=None, redoc_url=None)
    app.state.services = svc

    @app.middleware("http")
    async def envelope(request: Request, call_next: Any) -> Response:
        corr = request.headers.get("x-correlation-id") or uuid.uuid4().hex
        token = settings.token
        if token and request.headers.get("authorization") != f"Bearer {token}":
            resp = _error("UNAUTHORIZED", "missing or wrong bearer token", 401)
        else:
            try:
                resp = await call_next(request)
            except MedpipeError as exc:
                resp = _json(error_body(exc), status_for(exc))
        resp.headers["X-Correlation-ID"] = corr
        return resp

    @app.exception_handler(MedpipeError)
    async def domain_error(request: Request, exc: MedpipeError) -> Response:
        return _json(error_body(exc), status_for(exc))

    @app.get("/health")
    async def health() -> Response:
        return _json({"status": "ok"})

    @app.post("/pipelines")
    async def post_pipeline(request: Request) -> Response:
        raw = await request.body()
        return _json(await run_in_threadpool(svc.register_pipeline, raw), 201)

    @app.post("/studysets/query")
    async def post_query(request: Request) -> Response:
        body = await _body(request)
        if not isinstance(body.get("predicate"), str):
            raise _Bad("'predicate' must be a string")
        return _json(await run_in_threadpool(svc.query_study, body["predicate"], body.get("owner", "anonymous")), 201)

    @app.post("/studysets/{set_id}/homogeneity")
    async def post_homogeneity(set_id: str, request: Request) -> Response:
        body = await _body(request)
        return _json(await run_in_threadpool(svc.homogeneity, set_id, list(body.get("fields", []))))

    @app.post("/studysets/{set_id}/anonymize")
    async def post_anonymize(set_id: str, request: Request) -> Response:
        body = await _body(request)
        return _json(await run_in_threadpool(svc.anonymize, set_id, body.get("policy", {}), body.get("owner")), 201)

    @app.post("/plans")
    async def post_plan(request: Request) -> Response:
        body = await _body(request)
        if not isinstance(body.get("pipeline_id"), str):
            raise _Bad("'pipeline_id' must be a string")
        return _json(await run_in_threadpool(svc.make_plan, body["pipeline_id"], body.get("study_set_id"), body.get("grid")), 201)

    @app.post("/executions")
    async def post_execution(request: Request) -> Response:
        body = await _body(request)
        if not isinstance(body.get("plan_id"), str):
            raise _Bad("'plan_id' must be a string")
        return _json(await run_in_threadpool(svc.submit_execution, body["plan_id"], body.get("backend"), int(body.get("retry_limit", 1))), 202)

    @app.get("/executions/{execution_id}")
    async def get_execution(execution_id: str) -> Response:
        return _json(await run_in_threadpool(svc.execution_status, execution_id))

    @app.get("/provenance/events")
    async def get_events(
        execution_id: Optional[str] = None,
        task_id: Optional[str] = None,
        kind: Optional[str] = None,
        seq_from: Optional[int] = None,
        seq_to: Optional[int] = None,
    ) -> Response:
        return _json(await run_in_threadpool(svc.events, execution_id, task_id, kind, seq_from, seq_to))

    @app.get("/provenance/lineage/{artifact_id}")
    async def get_lineage(artifact_id: str) -> Response:
        return _json(await run_in_threadpool(svc.lineage, artifact_id))

    @app.get("/artifacts/{artifact_id}")
    async def get_artifact(artifact_id: str) -> Response:
        return Response(await run_in_threadpool(svc.artifact_bytes, artifact_id), media_type="application/octet-stream")

    return app


def serve(settings: Settings) -> None:
    """Run one gateway instance until interrupted."""
    import uvicorn

    host, _, port = settings.bind_address.rpartition(":")
    uvicorn.run(create_app(settings), host=host or "127.0.0.1", port=int(port))
