"""Standalone triage service.

The library facade (:class:`TriageApp`) is the single code path; the
HTTP layer only decodes requests and encodes responses around it, so
in-process and API consumers always observe identical semantics.

Endpoints: POST /v1/triage (synchronous), POST /v1/jobs + GET
/v1/jobs/{id} (asynchronous, results kept until a TTL), GET /healthz,
GET /version. Authentication is an optional static bearer token from
the BUGBLITZ_API_TOKEN environment variable.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional, Union

from . import __version__
from .action import ActionRunner, Mailer, TrackerClient
from .config import AppConfig, readiness_checks
from .errors import (
    BackendUnavailableError,
    ConfigError,
    NotFoundError,
    RequestValidationError,
    TriageError,
)
from .ingestion import assemble_request, load_pattern_registry
from .llm import HttpChatBackend, MockBackend, REFERENCE_MOCK_RULES
from .pipeline import TriageOutcome, run_pipeline
from .registry import ReportRegistry
from .templates import load_templates

logger = logging.getLogger(__name__)

API_TOKEN_ENV = "BUGBLITZ_API_TOKEN"


@dataclass(frozen=True)
class TriageResponse:
    request_id: str
    status: str
    outcomes: tuple[TriageOutcome, ...]
    warnings: tuple[str, ...] = ()

    def to_dict(self, include_timings: bool = True) -> dict:
        return {
            "request_id": self.request_id,
            "status": self.status,
            "outcomes": [o.to_dict(include_timings=include_timings) for o in self.outcomes],
            "warnings": list(self.warnings),
        }


def _response_status(outcomes) -> str:
    errored = sum(1 for o in outcomes if o.error)
    if not errored:
        return "completed"
    if errored == len(outcomes):
        return "failed"
    return "partial"


def make_backend(kind: str, mock_rules=None):
    if kind == "mock":
        return MockBackend(mock_rules if mock_rules is not None else REFERENCE_MOCK_RULES)
    if kind == "remote":
        return HttpChatBackend()
    raise ConfigError(f"unknown backend kind {kind!r} (expected 'mock' or 'remote')")


class TriageApp:
    """Everything a triage run needs, wired once from an AppConfig."""

    def __init__(self, config: AppConfig, backend):
        self.config = config
        self.backend = backend
        try:
            self.patterns = load_pattern_registry(config.patterns_path.read_bytes())
        except OSError as exc:
            raise ConfigError(f"cannot read pattern registry: {exc}") from exc
        self.templates = load_templates(config.templates_dir)
        self.profiles = config.profiles
        self.report_registry = ReportRegistry(config.registry_dir)
        self.tracker = TrackerClient(config.tracker) if config.tracker else None
        self.mailer = Mailer(config.mail) if config.mail else None

    def triage(self, payload: Union[dict, str, bytes]) -> TriageResponse:
        return self.run(assemble_request(payload))

    def run(self, request) -> TriageResponse:
        actions = ActionRunner(
            tracker=self.tracker,
            mailer=self.mailer,
            registry=self.report_registry,
            dry_run=request.options.dry_run,
        )
        outcomes = run_pipeline(
            request,
            self.patterns,
            self.backend,
            self.profiles,
            self.report_registry,
            templates=self.templates,
            actions=actions,
        )
        return TriageResponse(
            request_id=request.request_id,
            status=_response_status(outcomes),
            outcomes=tuple(outcomes),
        )


# ---------------------------------------------------------------------------
# Async job store
# ---------------------------------------------------------------------------

@dataclass
class Job:
    job_id: str
    status: str = "queued"  # queued | running | done | failed
    created_at: float = field(default_factory=time.monotonic)
    response: Optional[TriageResponse] = None
    error_status: int = 0
    error_message: str = ""


class JobStore:
    """In-memory job results with a TTL; durable state lives elsewhere."""

    def __init__(self, app: TriageApp, ttl_seconds: float, max_workers: int = 2):
        self._app = app
        self._ttl = ttl_seconds
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=max_workers)

    def submit(self, payload: bytes) -> str:
        job = Job(job_id=uuid.uuid4().hex)
        with self._lock:
            self._purge()
            self._jobs[job.job_id] = job
        self._pool.submit(self._run, job.job_id, payload)
        return job.job_id

    def _run(self, job_id: str, payload: bytes) -> None:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                return
            job.status = "running"
        try:
            response = self._app.triage(payload)
        except TriageError as exc:
            status, message = _error_status(exc)
            self._finish_failed(job_id, status, message)
            return
        except Exception as exc:  # a stuck "running" job would never expire usefully
            logger.exception("job %s crashed", job_id)
            self._finish_failed(job_id, 500, f"internal error: {exc}")
            return
        with self._lock:
            job = self._jobs.get(job_id)
            if job is not None:
                job.status = "done"
                job.response = response

    def _finish_failed(self, job_id: str, status: int, message: str) -> None:
        with self._lock:
            job = self._jobs.get(job_id)
            if job is not None:
                job.status = "failed"
                job.error_status = status
                job.error_message = message

    def get(self, job_id: str) -> Job:
        with self._lock:
            self._purge()
            job = self._jobs.get(job_id)
            if job is None:
                raise NotFoundError(f"unknown or expired job {job_id!r}")
            return job

    def _purge(self) -> None:
        cutoff = time.monotonic() - self._ttl
        expired = [jid for jid, job in self._jobs.items() if job.created_at < cutoff]
        for jid in expired:
            del self._jobs[jid]

    def shutdown(self) -> None:
        self._pool.shutdown(wait=False)


def _error_status(exc: TriageError) -> tuple[int, str]:
    if isinstance(exc, RequestValidationError):
        return 400, str(exc)
    if isinstance(exc, BackendUnavailableError):
        return 503, str(exc)
    if isinstance(exc, NotFoundError):
        return 404, str(exc)
    return 500, str(exc)


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------

class TriageServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, config: AppConfig, backend, host: Optional[str] = None,
                 port: Optional[int] = None):
        self.app = TriageApp(config, backend)
        self.jobs = JobStore(self.app, ttl_seconds=config.server.job_ttl_seconds)
        self.max_body_bytes = config.server.max_body_bytes
        address = (host or config.server.host, config.server.port if port is None else port)
        super().__init__(address, _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def close(self) -> None:
        self.jobs.shutdown()
        self.server_close()


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    timeout = 60  # a stalled client must not pin a handler thread forever

    # -- plumbing ----------------------------------------------------------

    def log_message(self, fmt, *args):  # default stderr spam off
        logger.debug("%s %s", self.address_string(), fmt % args)

    def _send_json(self, status: int, doc: dict) -> None:
        body = json.dumps(doc).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_error_json(self, status: int, message: str, details=None) -> None:
        doc = {"error": {"message": message}}
        if details:
            doc["error"]["details"] = list(details)
        self._send_json(status, doc)

    def _authorized(self) -> bool:
        token = os.environ.get(API_TOKEN_ENV)
        if not token:
            return True
        header = self.headers.get("Authorization", "")
        return header == f"Bearer {token}"

    def _read_body(self) -> Optional[bytes]:
        length = self.headers.get("Content-Length")
        if length is None:
            self._send_error_json(400, "Content-Length header required")
            return None
        try:
            length = int(length)
        except ValueError:
            self._send_error_json(400, f"unparseable Content-Length {length!r}")
            return None
        if length > self.server.max_body_bytes:
            self._send_error_json(
                413, f"request body of {length} bytes exceeds the "
                f"{self.server.max_body_bytes} byte cap"
            )
            return None
        return self.rfile.read(length)

    # -- routes ------------------------------------------------------------

    def do_GET(self):
        if self.path == "/healthz":
            self._handle_health()
            return
        if self.path == "/version":
            self._send_json(200, {"name": "bugblitz", "version": __version__})
            return
        if self.path.startswith("/v1/jobs/"):
            if not self._authorized():
                self._send_error_json(401, "missing or invalid bearer token")
                return
            self._handle_get_job(self.path[len("/v1/jobs/"):])
            return
        self._send_error_json(404, f"no route for GET {self.path}")

    def do_POST(self):
        if self.path not in ("/v1/triage", "/v1/jobs"):
            self._send_error_json(404, f"no route for POST {self.path}")
            return
        if not self._authorized():
            self._send_error_json(401, "missing or invalid bearer token")
            return
        body = self._read_body()
        if body is None:
            return
        if self.path == "/v1/jobs":
            job_id = self.server.jobs.submit(body)
            self._send_json(202, {"job_id": job_id, "status": "queued"})
            return
        try:
            response = self.server.app.triage(body)
        except RequestValidationError as exc:
            self._send_error_json(400, str(exc), exc.details)
            return
        except BackendUnavailableError as exc:
            self._send_error_json(503, str(exc))
            return
        except TriageError as exc:
            self._send_error_json(500, str(exc))
            return
        except Exception as exc:
            logger.exception("triage request crashed")
            self._send_error_json(500, f"internal error: {exc}")
            return
        self._send_json(200, response.to_dict())

    def _handle_get_job(self, job_id: str) -> None:
        try:
            job = self.server.jobs.get(job_id)
        except NotFoundError as exc:
            self._send_error_json(404, str(exc))
            return
        doc: dict = {"job_id": job.job_id, "status": job.status}
        if job.status == "done" and job.response is not None:
            doc["response"] = job.response.to_dict()
        elif job.status == "failed":
            doc["error"] = {"status": job.error_status, "message": job.error_message}
        self._send_json(200, doc)

    def _handle_health(self) -> None:
        checks = readiness_checks(self.server.app.config)
        ready = all(c.ok for c in checks)
        doc = {
            "status": "ready" if ready else "not-ready",
            "checks": {c.name: {"ok": c.ok, "detail": c.detail} for c in checks},
        }
        self._send_json(200 if ready else 503, doc)


def serve(config: AppConfig, backend, host: Optional[str] = None,
          port: Optional[int] = None) -> TriageServer:
    """Bind a server; the caller drives serve_forever()/shutdown()."""
    return TriageServer(config, backend, host=host, port=port)
