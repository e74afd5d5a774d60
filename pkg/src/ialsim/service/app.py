"""HTTP service exposing the simulator pipeline as submit-and-poll jobs.

Every pipeline stage gets one POST endpoint that enqueues a job and
returns immediately; clients poll ``GET /jobs/{id}`` until the job reaches
a terminal state. Artifacts are written to the server-side output
directories named in the requests.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..registry import ENV_IDS, resolve_env
from .jobs import Job, JobManager
from .schemas import (
    CollectRequest,
    EnvInfo,
    EvaluateRequest,
    ExperimentRequest,
    HealthInfo,
    JobInfo,
    TrainAipRequest,
    TrainPolicyRequest,
    VerifyRequest,
)


def _job_info(job: Job) -> JobInfo:
    return JobInfo(job_id=job.job_id, command=job.command, status=job.status,
                   created=job.created, started=job.started,
                   finished=job.finished, result=job.result, error=job.error,
                   error_kind=job.error_kind)


def create_app(workers: int = 1) -> FastAPI:
    app = FastAPI(title="ialsim", version=__version__,
                  description="influence-augmented local simulation pipeline")
    manager = JobManager(workers=workers)
    app.state.jobs = manager

    @app.get("/health", response_model=HealthInfo)
    def health():
        return HealthInfo(status="ok", version=__version__)

    @app.get("/envs", response_model=list[EnvInfo])
    def envs():
        out = []
        for env_id in ENV_IDS:
            env = resolve_env(env_id)
            d = env.descriptor
            out.append(EnvInfo(env_id=d.env_id, obs_width=d.obs_width,
                               action_count=d.action_count,
                               local_width=d.local_width,
                               dset_width=d.dset_width,
                               influence_classes=list(d.influence_classes),
                               default_k=env.default_k,
                               default_aip_arch=env.default_aip_arch,
                               default_obs_stack=env.default_obs_stack))
        return out

    def _submit(command: str, model) -> JobInfo:
        request = model.model_dump(exclude_none=True)
        return _job_info(manager.submit(command, request))

    @app.post("/collect", response_model=JobInfo, status_code=202)
    def collect(req: CollectRequest):
        return _submit("collect", req)

    @app.post("/train-aip", response_model=JobInfo, status_code=202)
    def train_aip(req: TrainAipRequest):
        return _submit("train-aip", req)

    @app.post("/train-policy", response_model=JobInfo, status_code=202)
    def train_policy(req: TrainPolicyRequest):
        return _submit("train-policy", req)

    @app.post("/evaluate", response_model=JobInfo, status_code=202)
    def evaluate(req: EvaluateRequest):
        return _submit("evaluate", req)

    @app.post("/experiment", response_model=JobInfo, status_code=202)
    def experiment(req: ExperimentRequest):
        return _submit("experiment", req)

    @app.post("/verify", response_model=JobInfo, status_code=202)
    def verify(req: VerifyRequest):
        return _submit("verify", req)

    @app.get("/jobs", response_model=list[JobInfo])
    def jobs():
        return [_job_info(j) for j in manager.list()]

    @app.get("/jobs/{job_id}", response_model=JobInfo)
    def job(job_id: str):
        found = manager.get(job_id)
        if found is None:
            raise HTTPException(status_code=404, detail=f"no job {job_id}")
        return _job_info(found)

    return app
