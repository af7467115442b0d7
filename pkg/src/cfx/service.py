"""HTTP service over a run directory.

Endpoints (all JSON, UTF-8):

    GET    /graph                     corpus graph (raw graph.json bytes)
    GET    /model/metrics             held-out metrics from training
    POST   /jobs                      launch a counterfactual search job
    GET    /jobs/{id}                 job record with progress
    DELETE /jobs/{id}                 cancel a queued or running job
    GET    /jobs/{id}/front           final front (raw pareto.json bytes)
    POST   /jobs/{id}/rank            rank the front under given weights
    GET    /jobs/{id}/impact          network impact of one front candidate
    GET    /ui                        static browser client, when built

Artifact endpoints return the exact bytes of the files in the run
directory. Request bodies are validated strictly: unknown fields and
inconsistent values yield 400 with the offending field path.
"""

from __future__ import annotations

import json
import logging
import queue
import re
import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from fastapi import FastAPI, Query, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, ConfigDict, Field

from .errors import ConfigError, SearchCancelled
from .objectives import EvaluationWeights
from .runs import build_rank_document, default_day, load_run, rank_document_bytes, run_explain, run_impact
from .scenario import ScenarioModel
from .store import FRONT_FILE, IMPACT_FILE, METRICS_FILE, PARETO_FILE, RunDirectory, atomic_write_json
from .store import SCHEMA_VERSION

log = logging.getLogger("cfx.service")

JOB_STATES = ("queued", "running", "done", "failed")


class RankRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    weights: tuple[float, float, float, float]

    def to_weights(self) -> EvaluationWeights:
        try:
            return EvaluationWeights(*self.weights)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class JobRecord:
    id: str
    state: str
    config: dict
    progress: int = 0
    error: str | None = None
    result: str | None = None
    created: str = ""
    started: str | None = None
    finished: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "state": self.state,
            "progress": self.progress,
            "config": self.config,
            "error": self.error,
            "result": self.result,
            "created": self.created,
            "started": self.started,
            "finished": self.finished,
        }


class JobManager:
    """File-backed job table plus a bounded worker pool."""

    def __init__(self, run: RunDirectory, max_jobs: int):
        self.run = run
        self.max_jobs = max(1, max_jobs)
        self.lock = threading.Lock()
        self.records: dict[str, JobRecord] = {}
        self.cancel_events: dict[str, threading.Event] = {}
        self.queue: queue.Queue[str | None] = queue.Queue()
        self.workers: list[threading.Thread] = []
        self.corpus = None
        self.model = None
        self.model_config: dict = {}

    # -- lifecycle -----------------------------------------------------------

    def recover(self) -> None:
        """Mark any job left queued/running by a previous process as failed."""
        jobs_root = self.run.root / "jobs"
        if not jobs_root.exists():
            return
        for record_path in sorted(jobs_root.glob("*/record.json")):
            try:
                doc = json.loads(record_path.read_text())
            except (OSError, json.JSONDecodeError):
                continue
            if doc.get("state") in ("queued", "running"):
                doc["state"] = "failed"
                doc["error"] = "interrupted"
                atomic_write_json(record_path, doc)
            record = JobRecord(**doc)
            self.records[record.id] = record

    def start(self) -> None:
        self.recover()
        try:
            self.corpus, self.model, self.model_config = load_run(self.run)
        except FileNotFoundError as exc:
            log.warning("serving without a trained model: %s", exc)
        for i in range(self.max_jobs):
            worker = threading.Thread(target=self._worker_loop, name=f"cfx-job-{i}", daemon=True)
            worker.start()
            self.workers.append(worker)

    def stop(self) -> None:
        for _ in self.workers:
            self.queue.put(None)
        for worker in self.workers:
            worker.join(timeout=5.0)

    # -- job table -----------------------------------------------------------

    def _next_id(self) -> str:
        highest = 0
        for existing in self.records:
            match = re.fullmatch(r"job-(\d+)", existing)
            if match:
                highest = max(highest, int(match.group(1)))
        return f"job-{highest + 1:04d}"

    def submit(self, scenario: ScenarioModel) -> JobRecord:
        if self.model is None:
            raise ConfigError("no trained model in this run directory; train first")
        from .store import utc_now_iso

        with self.lock:
            job_id = self._next_id()
            record = JobRecord(
                id=job_id, state="queued", config=scenario.model_dump(mode="json", exclude_none=True),
                created=utc_now_iso(),
            )
            self.records[job_id] = record
            self.cancel_events[job_id] = threading.Event()
            self._persist(record)
        self.queue.put(job_id)
        return record

    def get(self, job_id: str) -> JobRecord | None:
        with self.lock:
            return self.records.get(job_id)

    def cancel(self, job_id: str) -> JobRecord | None:
        with self.lock:
            record = self.records.get(job_id)
            if record is None:
                return None
            event = self.cancel_events.get(job_id)
            if event is not None:
                event.set()
            return record

    def _persist(self, record: JobRecord) -> None:
        atomic_write_json(self.run.job_dir(record.id) / "record.json", record.to_dict())

    def _transition(self, record: JobRecord, state: str, **updates) -> None:
        from .store import utc_now_iso

        with self.lock:
            record.state = state
            for key, value in updates.items():
                setattr(record, key, value)
            if state == "running":
                record.started = utc_now_iso()
            if state in ("done", "failed"):
                record.finished = utc_now_iso()
            self._persist(record)

    # -- worker --------------------------------------------------------------

    def _worker_loop(self) -> None:
        while True:
            job_id = self.queue.get()
            if job_id is None:
                return
            record = self.get(job_id)
            if record is None:
                continue
            cancel = self.cancel_events[job_id]
            self._transition(record, "running")
            if cancel.is_set():
                self._transition(record, "failed", error="cancelled")
                continue
            try:
                scenario = ScenarioModel.model_validate(record.config)

                def on_generation(generation: int) -> None:
                    with self.lock:
                        record.progress = generation

                run_explain(
                    self.run.job_dir(job_id), scenario, self.corpus, self.model,
                    self.model_config["window_length"],
                    on_generation=on_generation, should_stop=cancel.is_set,
                )
                self._transition(record, "done", result=f"jobs/{job_id}/{PARETO_FILE}")
            except SearchCancelled:
                self._transition(record, "failed", error="cancelled")
            except Exception as exc:  # job failures must not kill the worker
                log.exception("job %s failed", job_id)
                self._transition(record, "failed", error=f"{type(exc).__name__}: {exc}")


def _validation_response(errors) -> JSONResponse:
    details = []
    for err in errors:
        path = ".".join(str(part) for part in err.get("loc", ()))
        details.append({"path": path, "message": err.get("msg", "invalid value")})
    return JSONResponse(status_code=400, content={"error": "validation", "details": details})


def _file_response(path: Path, media_type: str = "application/json") -> Response:
    return Response(content=path.read_bytes(), media_type=media_type)


def create_app(run_dir: str | Path, max_jobs: int = 1, ui_dir: str | Path | None = None) -> FastAPI:
    run = RunDirectory(run_dir)
    manager = JobManager(run, max_jobs)

    @asynccontextmanager
    async def lifespan(_: FastAPI):
        manager.start()
        yield
        manager.stop()

    app = FastAPI(title="cfx", version=str(SCHEMA_VERSION), lifespan=lifespan)
    app.state.manager = manager

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(_: Request, exc: RequestValidationError):
        return _validation_response(exc.errors())

    @app.exception_handler(ConfigError)
    async def on_config_error(_: Request, exc: ConfigError):
        return JSONResponse(status_code=400, content={"error": "config", "details": [{"path": "", "message": str(exc)}]})

    @app.get("/graph")
    def get_graph():
        path = run.corpus_dir / "graph.json"
        if not path.exists():
            return JSONResponse(status_code=404, content={"error": "no corpus in this run directory"})
        return _file_response(path)

    @app.get("/model/metrics")
    def get_metrics():
        path = run.path(METRICS_FILE)
        if not path.exists():
            return JSONResponse(status_code=404, content={"error": "no trained model metrics"})
        return _file_response(path)

    @app.post("/jobs", status_code=201)
    def post_job(scenario: ScenarioModel):
        record = manager.submit(scenario)
        return JSONResponse(status_code=201, content=record.to_dict())

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        record = manager.get(job_id)
        if record is None:
            return JSONResponse(status_code=404, content={"error": f"unknown job {job_id}"})
        return JSONResponse(content=record.to_dict())

    @app.delete("/jobs/{job_id}")
    def delete_job(job_id: str):
        record = manager.cancel(job_id)
        if record is None:
            return JSONResponse(status_code=404, content={"error": f"unknown job {job_id}"})
        return JSONResponse(content=record.to_dict())

    def _done_record(job_id: str) -> tuple[JobRecord | None, Response | None]:
        record = manager.get(job_id)
        if record is None:
            return None, JSONResponse(status_code=404, content={"error": f"unknown job {job_id}"})
        if record.state != "done":
            return None, JSONResponse(
                status_code=409,
                content={"error": f"job {job_id} is {record.state}, not done"},
            )
        return record, None

    @app.get("/jobs/{job_id}/front")
    def get_front(job_id: str):
        record, error = _done_record(job_id)
        if error is not None:
            return error
        return _file_response(run.job_dir(job_id) / PARETO_FILE)

    @app.post("/jobs/{job_id}/rank")
    def post_rank(job_id: str, request: RankRequest):
        record, error = _done_record(job_id)
        if error is not None:
            return error
        pareto_doc = json.loads((run.job_dir(job_id) / PARETO_FILE).read_text())
        doc = build_rank_document(pareto_doc, request.to_weights())
        return Response(content=rank_document_bytes(doc), media_type="application/json")

    @app.get("/jobs/{job_id}/impact")
    def get_impact(job_id: str, candidate: int = Query(0, ge=0), day: str | None = None):
        record, error = _done_record(job_id)
        if error is not None:
            return error
        job_dir = run.job_dir(job_id)
        pareto_doc = json.loads((job_dir / PARETO_FILE).read_text())
        if candidate >= len(pareto_doc["candidates"]):
            return JSONResponse(status_code=400, content={"error": "validation", "details": [
                {"path": "query.candidate",
                 "message": f"front has {len(pareto_doc['candidates'])} candidates"}]})
        impact_day = date.fromisoformat(day) if day else default_day(pareto_doc["input_start"])
        target_dir = job_dir / f"impact-{candidate}-{impact_day.isoformat()}"
        impact_path = target_dir / IMPACT_FILE
        if not impact_path.exists():
            target_dir.mkdir(parents=True, exist_ok=True)
            run_impact(
                target_dir, manager.corpus, manager.model, pareto_doc,
                candidate, impact_day, manager.model_config["window_length"],
                render_figures=False,
            )
        return _file_response(impact_path)

    ui_path = _resolve_ui_dir(ui_dir)
    if ui_path is not None:
        app.mount("/ui", StaticFiles(directory=ui_path, html=True), name="ui")

    return app


def _resolve_ui_dir(ui_dir: str | Path | None) -> Path | None:
    import os

    candidates = []
    if ui_dir:
        candidates.append(Path(ui_dir))
    env = os.environ.get("CFX_UI_DIR")
    if env:
        candidates.append(Path(env))
    candidates.append(Path(__file__).resolve().parents[2] / "frontend" / "dist")
    for candidate in candidates:
        if candidate.is_dir():
            return candidate
    if ui_dir:
        raise FileNotFoundError(f"UI directory not found: {ui_dir}")
    return None
