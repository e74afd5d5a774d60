"""In-process job registry running pipeline stages on worker threads."""

from __future__ import annotations

import threading
import time
import traceback
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from ..pipeline import COMMANDS, ArtifactError, CheckFailure, UsageError


@dataclass
class Job:
    job_id: str
    command: str
    request: dict
    status: str = "queued"
    created: float = field(default_factory=time.time)
    started: float | None = None
    finished: float | None = None
    result: dict | None = None
    error: str | None = None
    error_kind: str | None = None


class JobManager:
    """Serializes pipeline runs onto a small thread pool; job state is
    in-memory and lives as long as the service process."""

    def __init__(self, workers: int = 1):
        self._executor = ThreadPoolExecutor(max_workers=workers)
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()

    def submit(self, command: str, request: dict) -> Job:
        if command not in COMMANDS:
            raise ValueError(f"unknown command {command!r}")
        job = Job(uuid.uuid4().hex[:12], command, request)
        with self._lock:
            self._jobs[job.job_id] = job
        self._executor.submit(self._run, job)
        return job

    def get(self, job_id: str) -> Job | None:
        with self._lock:
            return self._jobs.get(job_id)

    def list(self) -> list[Job]:
        with self._lock:
            return sorted(self._jobs.values(), key=lambda j: j.created)

    def _run(self, job: Job) -> None:
        job.status = "running"
        job.started = time.time()
        try:
            job.result = COMMANDS[job.command](dict(job.request))
            job.status = "done"
        except UsageError as exc:
            self._fail(job, "usage", exc)
        except ArtifactError as exc:
            self._fail(job, "artifact", exc)
        except CheckFailure as exc:
            self._fail(job, "check", exc)
        except Exception as exc:
            self._fail(job, "internal", exc)
            job.error = f"{job.error}\n{traceback.format_exc()}"
        finally:
            job.finished = time.time()

    @staticmethod
    def _fail(job: Job, kind: str, exc: Exception) -> None:
        job.status = "failed"
        job.error_kind = kind
        job.error = str(exc)

    def shutdown(self) -> None:
        self._executor.shutdown(wait=False, cancel_futures=True)
