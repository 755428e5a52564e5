"""HTTP job service for harmonization runs.

Jobs are directories under a run root: uploaded inputs, a job record,
an append-only event log, and the run artifacts. The event log is the
source of truth for streaming clients; every event is persisted (with
fsync) before any subscriber sees it, and streams resume from a
sequence number with no gaps or duplicates. Runs execute on a bounded
pool of worker threads, one diffusion backend instance per job.

Interactive runs pause in awaiting_human until a decision arrives over
HTTP; the decision (optionally carrying an edited description) replaces
the evaluator's proposal and the run resumes.
"""

from __future__ import annotations

import dataclasses
import json
import os
import queue
import shutil
import threading
import time
import uuid
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterator, Optional

from fastapi import FastAPI, File, Form, Request, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse, StreamingResponse

from .config import harmonize_config_from_payload
from .descriptor import DescriptionProvider, GeminiProvider, ScriptedProvider
from .diffusion import DiffusionBackend, get_backend
from .errors import ConfigError, HarmoniaError, InputError, ProviderUnavailable
from .evaluate import (
    CONCLUDE,
    CONTINUE,
    REGENERATE,
    Decision,
    Evaluator,
    TrainedEvaluator,
)
from .harmonize import (
    RUN_FILE,
    STATUS_AWAITING_HUMAN,
    STATUS_CONCLUDED,
    STATUS_FAILED,
    STATUS_RUNNING,
    RunProviders,
    SteeringDecision,
    description_from_payload,
    run,
    write_atomic,
)
from .imagecore import load_case

JOB_FILE = "job.json"
EVENTS_FILE = "events.jsonl"
INDEX_FILE = "index.json"
RUN_DIR = "run"

STATUS_QUEUED = "queued"
STATUS_CANCELLED = "cancelled"

TERMINAL_STATUSES = frozenset(
    {STATUS_CONCLUDED, STATUS_FAILED, STATUS_CANCELLED})

_TRANSITIONS = {
    STATUS_QUEUED: {STATUS_RUNNING, STATUS_CANCELLED},
    STATUS_RUNNING: {STATUS_AWAITING_HUMAN, STATUS_CONCLUDED, STATUS_FAILED,
                     STATUS_CANCELLED},
    STATUS_AWAITING_HUMAN: {STATUS_RUNNING, STATUS_FAILED, STATUS_CANCELLED},
    STATUS_CONCLUDED: set(),
    STATUS_FAILED: set(),
    STATUS_CANCELLED: set(),
}

EVENT_KINDS = ("description_generated", "iteration_done", "score",
               "decision_proposed", "awaiting_human", "concluded", "failed")


def _load_schema(name: str) -> dict:
    text = resources.files("harmonia").joinpath(
        f"schemas/{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


SCHEMAS = {name: _load_schema(name) for name in ("job", "event", "run")}
JOB_RECORD_SCHEMA = SCHEMAS["job"]
RUN_EVENT_SCHEMA = SCHEMAS["event"]
RUN_STATE_SCHEMA = SCHEMAS["run"]


class UnknownJob(KeyError):
    """No job with the requested id exists under the run root."""


class NotAwaitingHuman(Exception):
    """A decision arrived while the job was not paused for one."""

    def __init__(self, status: str):
        self.status = status
        super().__init__(f"job is {status}, not {STATUS_AWAITING_HUMAN}")


class JobCancelled(Exception):
    """Internal control flow: unwinds a worker out of a cancelled run.

    Deliberately not a HarmoniaError: the run loop treats HarmoniaError
    as a run failure, and cancellation must bypass that handling.
    """


_CANCEL = object()


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def _write_json_atomic(path: Path, payload: dict) -> None:
    write_atomic(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


@dataclasses.dataclass
class JobRecord:
    """Persistent description of one submitted job."""

    job_id: str
    case_id: str
    image_file: str
    mask_file: str
    config: dict
    status: str
    run_file: Optional[str]
    error: Optional[str]
    created_at: str
    updated_at: str

    def to_payload(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_payload(cls, payload: dict) -> "JobRecord":
        names = [f.name for f in dataclasses.fields(cls)]
        return cls(**{name: payload[name] for name in names})


@dataclasses.dataclass
class ServiceConfig:
    """Service wiring: storage root, backend choice, provider factory."""

    run_root: str | Path = "runs"
    backend_name: str = "toy"
    backend_options: dict = dataclasses.field(default_factory=dict)
    max_sessions: int = 2
    poll_interval: float = 0.05
    keepalive_seconds: float = 15.0
    describer_factory: Optional[
        Callable[[JobRecord], DescriptionProvider]] = None
    backend_factory: Optional[Callable[[], DiffusionBackend]] = None
    evaluator_factory: Optional[Callable[[JobRecord], Evaluator]] = None

    def __post_init__(self):
        if self.max_sessions < 1:
            raise ConfigError("max_sessions must be at least 1")
        if self.poll_interval <= 0:
            raise ConfigError("poll_interval must be positive")

    @classmethod
    def from_env(cls, env: Optional[dict] = None) -> "ServiceConfig":
        """Build a config from HARMONIA_* environment variables.

        HARMONIA_RUN_ROOT: job storage directory (default ./runs).
        HARMONIA_BACKEND: diffusion backend name (default toy).
        HARMONIA_WEIGHTS: weights path handed to non-toy backends.
        HARMONIA_DESCRIPTIONS: scripted provider response file.
        HARMONIA_PROVIDER: "scripted" or "gemini" (credentials via
            GEMINI_API_KEY).
        HARMONIA_EVALUATOR: trained evaluator artifact path; unset
            falls back to the statistics evaluator.
        HARMONIA_MAX_SESSIONS: concurrent run cap.
        """
        env = dict(os.environ if env is None else env)
        backend_name = env.get("HARMONIA_BACKEND", "toy")
        backend_options: dict = {}
        if backend_name != "toy" and env.get("HARMONIA_WEIGHTS"):
            backend_options["weights"] = env["HARMONIA_WEIGHTS"]
        evaluator_factory = None
        artifact = env.get("HARMONIA_EVALUATOR", "")
        if artifact:
            evaluator_factory = (
                lambda record: TrainedEvaluator.load(artifact))
        return cls(
            run_root=env.get("HARMONIA_RUN_ROOT", "runs"),
            backend_name=backend_name,
            backend_options=backend_options,
            max_sessions=int(env.get("HARMONIA_MAX_SESSIONS", "2")),
            describer_factory=_describer_factory_from_env(env),
            evaluator_factory=evaluator_factory,
        )


def _describer_factory_from_env(
        env: dict) -> Optional[Callable[[JobRecord], DescriptionProvider]]:
    provider = env.get("HARMONIA_PROVIDER", "")
    lines_path = env.get("HARMONIA_DESCRIPTIONS", "")
    if provider == "gemini":
        model = env.get("HARMONIA_PROVIDER_MODEL", "gemini-1.5-flash")
        return lambda record: GeminiProvider(model=model)
    if lines_path:
        return lambda record: ScriptedProvider(
            lines_path, seed=int(record.config.get("seed", 0)))
    return None


class _Job:
    """Runtime state of one job: record, event mirror, wait primitives."""

    def __init__(self, record: JobRecord, job_dir: Path):
        self.record = record
        self.dir = job_dir
        self.lock = threading.RLock()
        self.changed = threading.Condition(self.lock)
        self.events: list[dict] = []
        self.decision_queue: "queue.Queue" = queue.Queue()
        self.cancel_requested = False

    def scores(self) -> list[float]:
        return [e["payload"]["value"] for e in self.events
                if e["kind"] == "score"]


class JobService:
    """Owns job storage, the worker pool, and all job state mutation."""

    def __init__(self, cfg: ServiceConfig):
        self.cfg = cfg
        self.root = Path(cfg.run_root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._jobs: dict[str, _Job] = {}
        self._registry_lock = threading.Lock()
        self._work: "queue.Queue[Optional[str]]" = queue.Queue()
        self._workers: list[threading.Thread] = []
        self._recover()

    # ------------------------------------------------------------------
    # lifecycle

    def start(self) -> None:
        """Spawn the worker pool (idempotent)."""
        if self._workers:
            return
        for i in range(self.cfg.max_sessions):
            worker = threading.Thread(target=self._worker_loop,
                                      name=f"harmonia-worker-{i}",
                                      daemon=True)
            worker.start()
            self._workers.append(worker)

    def stop(self, timeout: float = 5.0) -> None:
        """Ask workers to exit after their current job and join them."""
        for _ in self._workers:
            self._work.put(None)
        for worker in self._workers:
            worker.join(timeout=timeout)
        self._workers = []

    # ------------------------------------------------------------------
    # submission and lookup

    def submit(self, image_bytes: bytes, mask_bytes: bytes,
               overrides: Optional[dict] = None) -> JobRecord:
        """Validate an upload, persist it, and queue the job.

        Raises:
            InputError: undecodable inputs, mask problems, bad config.
        """
        job_id = uuid.uuid4().hex[:12]
        job_dir = self.root / job_id
        job_dir.mkdir(parents=True)
        (job_dir / "image.png").write_bytes(image_bytes)
        (job_dir / "mask.png").write_bytes(mask_bytes)
        try:
            cfg = harmonize_config_from_payload(overrides or {})
            load_case(job_dir / "image.png", job_dir / "mask.png",
                      case_id=job_id)
        except InputError:
            shutil.rmtree(job_dir, ignore_errors=True)
            raise
        now = _utcnow()
        record = JobRecord(
            job_id=job_id, case_id=job_id,
            image_file="image.png", mask_file="mask.png",
            config=cfg.to_payload(), status=STATUS_QUEUED,
            run_file=None, error=None, created_at=now, updated_at=now)
        job = _Job(record, job_dir)
        _write_json_atomic(job_dir / JOB_FILE, record.to_payload())
        with self._registry_lock:
            self._jobs[job_id] = job
        self._write_index()
        self._work.put(job_id)
        return record

    def get(self, job_id: str) -> _Job:
        with self._registry_lock:
            job = self._jobs.get(job_id)
        if job is None:
            raise UnknownJob(job_id)
        return job

    def records(self) -> list[JobRecord]:
        with self._registry_lock:
            jobs = list(self._jobs.values())
        records = [job.record for job in jobs]
        return sorted(records, key=lambda r: (r.created_at, r.job_id))

    # ------------------------------------------------------------------
    # steering

    def decide(self, job_id: str, payload: dict) -> JobRecord:
        """Inject a human decision into a paused job.

        Raises:
            UnknownJob: no such job.
            NotAwaitingHuman: the job is not paused.
            InputError: malformed decision payload.
        """
        job = self.get(job_id)
        with job.lock:
            if job.record.status != STATUS_AWAITING_HUMAN:
                raise NotAwaitingHuman(job.record.status)
            steering = self._parse_steering(job, payload)
            self._set_status(job, STATUS_RUNNING)
            job.decision_queue.put(steering)
            return job.record

    def _parse_steering(self, job: _Job, payload: dict) -> SteeringDecision:
        if not isinstance(payload, dict):
            raise InputError("decision payload must be a JSON object")
        kind = payload.get("kind")
        if kind not in (CONTINUE, REGENERATE, CONCLUDE):
            raise InputError(f"unknown decision kind {kind!r}")
        description = None
        if payload.get("new_description") is not None:
            if kind != REGENERATE:
                raise InputError(
                    "new_description only applies to regenerate decisions")
            try:
                description = description_from_payload(
                    payload["new_description"])
            except (KeyError, TypeError, AttributeError) as exc:
                raise InputError(
                    f"malformed new_description: {exc}") from exc
        if kind == REGENERATE:
            scores = job.scores()
            if not scores:
                raise InputError("cannot regenerate before any iteration")
            revert_to = payload.get("revert_to")
            if revert_to is None:
                revert_to = scores.index(max(scores))
            if not isinstance(revert_to, int) or isinstance(revert_to, bool):
                raise InputError("revert_to must be an integer")
            if not 0 <= revert_to < len(scores):
                raise InputError(
                    f"revert_to {revert_to} outside 0..{len(scores) - 1}")
            decision = Decision(REGENERATE, revert_to=revert_to)
        else:
            decision = Decision(kind)
        return SteeringDecision(decision=decision, description=description)

    def cancel(self, job_id: str) -> JobRecord:
        """Request cancellation; queued jobs cancel immediately, active
        jobs cancel at their next event boundary."""
        job = self.get(job_id)
        with job.lock:
            status = job.record.status
            if status in TERMINAL_STATUSES:
                return job.record
            job.cancel_requested = True
            if status == STATUS_QUEUED:
                self._set_status(job, STATUS_CANCELLED)
            elif status == STATUS_AWAITING_HUMAN:
                job.decision_queue.put(_CANCEL)
            return job.record

    # ------------------------------------------------------------------
    # event streaming

    def events_after(self, job_id: str, last_seq: int = 0) -> list[dict]:
        job = self.get(job_id)
        with job.lock:
            return list(job.events[last_seq:])

    def stream(self, job_id: str, last_seq: int = 0) -> Iterator[str]:
        """Server-push frames: replay events past last_seq, then tail
        until the job reaches a terminal status."""
        job = self.get(job_id)
        cursor = last_seq
        next_keepalive = time.monotonic() + self.cfg.keepalive_seconds
        while True:
            with job.lock:
                pending = list(job.events[cursor:])
                if not pending:
                    if job.record.status in TERMINAL_STATUSES:
                        return
                    job.changed.wait(timeout=self.cfg.poll_interval)
                    pending = list(job.events[cursor:])
            for event in pending:
                cursor = event["seq"]
                yield _sse_frame(event)
                next_keepalive = (time.monotonic()
                                  + self.cfg.keepalive_seconds)
            if not pending and time.monotonic() >= next_keepalive:
                yield ": keepalive\n\n"
                next_keepalive = (time.monotonic()
                                  + self.cfg.keepalive_seconds)

    # ------------------------------------------------------------------
    # artifacts

    def artifact_path(self, job_id: str, kind: str,
                      rest: str) -> tuple[Path, str]:
        """Resolve an artifact request to (path, media type).

        Raises:
            UnknownJob: no such job, kind, or file.
        """
        job = self.get(job_id)
        run_dir = job.dir / RUN_DIR
        try:
            if kind == "run" and rest in ("json", RUN_FILE):
                resolved = run_dir / RUN_FILE
                media = "application/json"
            elif kind == "iteration":
                resolved = run_dir / f"iter_{int(rest)}.png"
                media = "image/png"
            elif kind == "lut":
                resolved = run_dir / f"lut_{int(rest)}.cube"
                media = "text/plain"
            elif kind == "attention":
                index, _, name = rest.partition("/")
                name = name.removesuffix(".png")
                if not name.replace("_", "").isalnum():
                    raise UnknownJob(job_id)
                resolved = run_dir / f"attn_{int(index)}" / f"{name}.png"
                media = "image/png"
            else:
                raise UnknownJob(job_id)
        except ValueError as exc:
            raise UnknownJob(job_id) from exc
        resolved = resolved.resolve()
        if not (resolved.is_relative_to(job.dir.resolve())
                and resolved.is_file()):
            raise UnknownJob(job_id)
        return resolved, media

    # ------------------------------------------------------------------
    # internals

    def _worker_loop(self) -> None:
        while True:
            job_id = self._work.get()
            if job_id is None:
                return
            try:
                job = self.get(job_id)
            except UnknownJob:
                continue
            try:
                self._run_job(job)
            except JobCancelled:
                self._finalize(job, STATUS_CANCELLED)
            except HarmoniaError as exc:
                self._fail(job, f"{type(exc).__name__}: {exc}")
            except Exception as exc:  # noqa: BLE001 - workers must survive
                self._fail(job, f"internal error: {type(exc).__name__}: {exc}")

    def _run_job(self, job: _Job) -> None:
        with job.lock:
            if job.record.status != STATUS_QUEUED:
                return
            if job.cancel_requested:
                self._set_status(job, STATUS_CANCELLED)
                return
        self._set_status(job, STATUS_RUNNING)
        cfg = harmonize_config_from_payload(job.record.config)
        case = load_case(job.dir / job.record.image_file,
                         job.dir / job.record.mask_file,
                         case_id=job.record.case_id)
        if self.cfg.backend_factory is not None:
            backend = self.cfg.backend_factory()
        else:
            backend = get_backend(self.cfg.backend_name,
                                  **self.cfg.backend_options)
        if self.cfg.describer_factory is None:
            raise ProviderUnavailable(
                "no description provider configured for the service")
        evaluator = None
        if self.cfg.evaluator_factory is not None:
            evaluator = self.cfg.evaluator_factory(job.record)
        providers = RunProviders(
            describer=self.cfg.describer_factory(job.record),
            evaluator=evaluator,
            decision_source=self._decision_source(job))
        state = run(case, providers, backend, cfg,
                    out_dir=job.dir / RUN_DIR,
                    on_event=self._event_sink(job))
        run_file = f"{RUN_DIR}/{RUN_FILE}"
        if state.status == STATUS_CONCLUDED:
            self._finalize(job, STATUS_CONCLUDED, run_file=run_file)
        else:
            self._finalize(job, STATUS_FAILED, error=state.error,
                           run_file=run_file)

    def _decision_source(self, job: _Job):
        def source(run_state, proposal) -> SteeringDecision:
            item = job.decision_queue.get()
            if item is _CANCEL:
                raise JobCancelled()
            return item

        return source

    def _event_sink(self, job: _Job):
        def emit(kind: str, payload: dict) -> None:
            with job.lock:
                if job.cancel_requested:
                    raise JobCancelled()
                self._append_event(job, kind, payload)
                if kind == "awaiting_human":
                    self._set_status(job, STATUS_AWAITING_HUMAN)

        return emit

    def _append_event(self, job: _Job, kind: str, payload: dict) -> None:
        with job.lock:
            event = {
                "job_id": job.record.job_id,
                "seq": len(job.events) + 1,
                "kind": kind,
                "payload": payload,
            }
            line = json.dumps(event, sort_keys=True)
            with open(job.dir / EVENTS_FILE, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            job.events.append(event)
            job.changed.notify_all()

    def _set_status(self, job: _Job, status: str, error: Optional[str] = None,
                    run_file: Optional[str] = None) -> None:
        with job.lock:
            current = job.record.status
            if status != current and status not in _TRANSITIONS[current]:
                raise RuntimeError(
                    f"illegal status transition {current} -> {status}")
            job.record.status = status
            if error is not None:
                job.record.error = error
            if run_file is not None:
                job.record.run_file = run_file
            job.record.updated_at = _utcnow()
            _write_json_atomic(job.dir / JOB_FILE, job.record.to_payload())
            job.changed.notify_all()
        self._write_index()

    def _finalize(self, job: _Job, status: str, error: Optional[str] = None,
                  run_file: Optional[str] = None) -> None:
        with job.lock:
            if job.record.status in TERMINAL_STATUSES:
                return
            self._set_status(job, status, error=error, run_file=run_file)

    def _fail(self, job: _Job, error: str) -> None:
        with job.lock:
            if job.record.status in TERMINAL_STATUSES:
                return
            self._append_event(job, "failed", {"error": error})
            self._set_status(job, STATUS_FAILED, error=error)

    def _write_index(self) -> None:
        with self._registry_lock:
            entries = [
                {
                    "job_id": job.record.job_id,
                    "case_id": job.record.case_id,
                    "status": job.record.status,
                    "created_at": job.record.created_at,
                    "updated_at": job.record.updated_at,
                }
                for job in self._jobs.values()
            ]
        entries.sort(key=lambda e: (e["created_at"], e["job_id"]))
        _write_json_atomic(self.root / INDEX_FILE, {"jobs": entries})

    def _recover(self) -> None:
        """Reload persisted jobs after a restart.

        Queued jobs are re-enqueued. Jobs that were mid-run adopt their
        event log's terminal event (or run.json's terminal status) when
        one was persisted; otherwise they report failed. Nothing is
        deleted, so no job vanishes across restarts.
        """
        for job_dir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            job_file = job_dir / JOB_FILE
            if not job_file.exists():
                continue
            try:
                record = JobRecord.from_payload(
                    json.loads(job_file.read_text()))
            except (json.JSONDecodeError, KeyError, TypeError):
                continue
            job = _Job(record, job_dir)
            job.events = _load_events(job_dir / EVENTS_FILE)
            self._jobs[record.job_id] = job
            if record.status == STATUS_QUEUED:
                self._work.put(record.job_id)
            elif record.status in (STATUS_RUNNING, STATUS_AWAITING_HUMAN):
                self._adopt_interrupted(job)
        self._write_index()

    def _adopt_interrupted(self, job: _Job) -> None:
        run_json = job.dir / RUN_DIR / RUN_FILE
        run_file = f"{RUN_DIR}/{RUN_FILE}" if run_json.exists() else None
        last_kind = job.events[-1]["kind"] if job.events else ""
        if last_kind == "concluded":
            self._set_status(job, STATUS_CONCLUDED, run_file=run_file)
            return
        if last_kind == "failed":
            error = job.events[-1]["payload"].get("error")
            self._set_status(job, STATUS_FAILED, error=error,
                             run_file=run_file)
            return
        state = None
        if run_json.exists():
            try:
                state = json.loads(run_json.read_text())
            except json.JSONDecodeError:
                state = None
        if state and state.get("status") in (STATUS_CONCLUDED, STATUS_FAILED):
            self._set_status(job, state["status"], error=state.get("error"),
                             run_file=run_file)
            return
        error = "interrupted by service restart"
        self._append_event(job, "failed", {"error": error})
        self._set_status(job, STATUS_FAILED, error=error, run_file=run_file)


def _load_events(path: Path) -> list[dict]:
    """Read an event log, tolerating a torn final line after a crash."""
    if not path.exists():
        return []
    events: list[dict] = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            events.append(json.loads(line))
        except json.JSONDecodeError:
            break
    return events


def _sse_frame(event: dict) -> str:
    body = json.dumps(event, sort_keys=True)
    return f"id: {event['seq']}\nevent: {event['kind']}\ndata: {body}\n\n"


# ----------------------------------------------------------------------
# HTTP layer


def _error(status_code: int, code: str, message: str) -> JSONResponse:
    return JSONResponse({"code": code, "message": message},
                        status_code=status_code)


def create_app(service: JobService) -> FastAPI:
    """Wire a JobService into a FastAPI application."""

    from contextlib import asynccontextmanager

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        service.start()
        yield
        service.stop()

    app = FastAPI(title="harmonia service", lifespan=lifespan)
    app.state.service = service
    # the browser studio is typically served from a different origin
    # (static file server) than this API
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["GET", "POST"], allow_headers=["*"])

    @app.post("/jobs", status_code=202)
    async def submit_job(image: UploadFile = File(...),
                         mask: UploadFile = File(...),
                         config: str = Form("{}")):
        try:
            overrides = json.loads(config) if config else {}
        except json.JSONDecodeError as exc:
            return _error(400, "BAD_CONFIG", f"config is not JSON: {exc}")
        if not isinstance(overrides, dict):
            return _error(400, "BAD_CONFIG", "config must be a JSON object")
        image_bytes = await image.read()
        mask_bytes = await mask.read()
        try:
            record = service.submit(image_bytes, mask_bytes, overrides)
        except InputError as exc:
            return _error(400, exc.code, str(exc))
        return {"job_id": record.job_id, "status": record.status}

    @app.get("/jobs")
    def list_jobs():
        return {"jobs": [r.to_payload() for r in service.records()]}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        try:
            job = service.get(job_id)
        except UnknownJob:
            return _error(404, "NOT_FOUND", f"unknown job {job_id}")
        with job.lock:
            return job.record.to_payload()

    @app.get("/jobs/{job_id}/events")
    def stream_events(job_id: str, request: Request, last_seq: int = 0):
        header_seq = request.headers.get("last-event-id")
        if header_seq is not None and last_seq == 0:
            try:
                last_seq = int(header_seq)
            except ValueError:
                return _error(400, "BAD_INPUT", "Last-Event-ID not an integer")
        if last_seq < 0:
            return _error(400, "BAD_INPUT", "last_seq must be >= 0")
        try:
            service.get(job_id)
        except UnknownJob:
            return _error(404, "NOT_FOUND", f"unknown job {job_id}")
        frames = service.stream(job_id, last_seq)
        headers = {"Cache-Control": "no-cache", "X-Accel-Buffering": "no"}
        return StreamingResponse(frames, media_type="text/event-stream",
                                 headers=headers)

    @app.post("/jobs/{job_id}/decision")
    async def post_decision(job_id: str, request: Request):
        try:
            payload = await request.json()
        except json.JSONDecodeError as exc:
            return _error(400, "BAD_INPUT", f"decision is not JSON: {exc}")
        try:
            record = service.decide(job_id, payload)
        except UnknownJob:
            return _error(404, "NOT_FOUND", f"unknown job {job_id}")
        except NotAwaitingHuman as exc:
            return _error(409, "NOT_AWAITING_HUMAN", str(exc))
        except InputError as exc:
            return _error(400, exc.code, str(exc))
        return record.to_payload()

    @app.post("/jobs/{job_id}/cancel")
    def cancel_job(job_id: str):
        try:
            record = service.cancel(job_id)
        except UnknownJob:
            return _error(404, "NOT_FOUND", f"unknown job {job_id}")
        return record.to_payload()

    @app.get("/jobs/{job_id}/artifacts/{kind}/{rest:path}")
    def get_artifact(job_id: str, kind: str, rest: str):
        try:
            path, media = service.artifact_path(job_id, kind, rest)
        except UnknownJob:
            return _error(404, "NOT_FOUND",
                          f"no artifact {kind}/{rest} for job {job_id}")
        return FileResponse(path, media_type=media)

    @app.get("/schemas/{name}")
    def get_schema(name: str):
        schema = SCHEMAS.get(name.removesuffix(".json"))
        if schema is None:
            return _error(404, "NOT_FOUND", f"unknown schema {name}")
        return schema

    return app


def build_app(env: Optional[dict] = None) -> FastAPI:
    """App factory for `uvicorn harmonia.service:build_app --factory`."""
    return create_app(JobService(ServiceConfig.from_env(env)))
