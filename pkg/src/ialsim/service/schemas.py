"""Request/response models for the pipeline service."""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, Field


class CollectRequest(BaseModel):
    env: str
    n: int = Field(gt=0)
    out_dir: str
    seed: int = 0
    k: int | None = None
    env_overrides: dict[str, Any] = Field(default_factory=dict)
    dump_trajectory: int | None = None


class TrainAipRequest(BaseModel):
    dataset: str
    out_dir: str
    variant: Literal["trained", "untrained", "fixed-marginal"] = "trained"
    arch: Literal["ff", "gru"] | None = None
    seed: int = 0
    epochs: int | None = None
    lr: float | None = None
    hidden: int | list[int] | None = None
    batch: int | None = None
    batch_episodes: int | None = None
    patience: int | None = None


class TrainPolicyRequest(BaseModel):
    env: str
    out_dir: str
    sim: Literal["gs", "ials"] = "gs"
    predictor: str | None = None
    total_steps: int = Field(default=200_000, ge=0)
    seed: int = 0
    time_offset: float | None = None
    env_overrides: dict[str, Any] = Field(default_factory=dict)
    obs_stack: int | None = None
    hidden: list[int] | None = None
    horizon: int | None = None
    minibatch: int | None = None
    epochs: int | None = None
    eval_every: int | None = None
    eval_episodes: int | None = None
    lr: float | None = None
    gamma: float | None = None
    lam: float | None = None
    clip: float | None = None
    entropy_coef: float | None = None
    vf_coef: float | None = None
    max_grad_norm: float | None = None


class EvaluateRequest(BaseModel):
    env: str
    policy: str
    episodes: int = Field(default=10, gt=0)
    seed: int = 0
    out_dir: str | None = None
    env_overrides: dict[str, Any] = Field(default_factory=dict)


class ExperimentRequest(BaseModel):
    env: str
    out_dir: str
    arms: list[dict[str, Any]]
    seeds: list[int] = Field(default_factory=lambda: [0])
    total_steps: int = 200_000
    env_overrides: dict[str, Any] = Field(default_factory=dict)
    aip: dict[str, Any] = Field(default_factory=dict)
    rl: dict[str, Any] = Field(default_factory=dict)
    histogram_steps: int | None = None
    random_baseline_episodes: int | None = None


class VerifyRequest(BaseModel):
    seed: int = 0
    fast: bool = False
    out_dir: str | None = None


class JobInfo(BaseModel):
    job_id: str
    command: str
    status: Literal["queued", "running", "done", "failed"]
    created: float
    started: float | None = None
    finished: float | None = None
    result: dict[str, Any] | None = None
    error: str | None = None
    error_kind: Literal["usage", "artifact", "check", "internal"] | None = None


class HealthInfo(BaseModel):
    status: str
    version: str


class EnvInfo(BaseModel):
    env_id: str
    obs_width: int
    action_count: int
    local_width: int
    dset_width: int
    influence_classes: list[int]
    default_k: int
    default_aip_arch: str
    default_obs_stack: int
