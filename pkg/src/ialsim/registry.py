"""Environment registry: one place that knows how to build each simulator
family and its default predictor/policy settings."""

from __future__ import annotations

from dataclasses import dataclass, fields

from . import exact, traffic, warehouse

ENV_IDS = ("warehouse", "warehouse-fixed8", "traffic", "toy-dbn")


@dataclass
class ResolvedEnv:
    env_id: str
    config: object
    descriptor: object
    default_k: int
    default_aip_arch: str
    default_obs_stack: int
    make_global: callable
    make_local: callable
    toy_model: object | None = None  # set for the toy network only


def _apply_overrides(cls, base: dict, overrides: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown config fields for {cls.__name__}: {sorted(unknown)}")
    merged = {**base, **overrides}
    if "controlled_region" in merged and isinstance(merged["controlled_region"], list):
        merged["controlled_region"] = tuple(merged["controlled_region"])
    if "controlled" in merged and isinstance(merged["controlled"], list):
        merged["controlled"] = tuple(merged["controlled"])
    if "hidden" in merged and isinstance(merged["hidden"], list):
        merged["hidden"] = tuple(merged["hidden"])
    return cls(**merged)


def resolve_env(env_id: str, overrides: dict | None = None) -> ResolvedEnv:
    overrides = dict(overrides or {})
    if env_id == "warehouse" or env_id == "warehouse-fixed8":
        base = {}
        if env_id == "warehouse-fixed8":
            base["item_lifetime"] = 8
        cfg = _apply_overrides(warehouse.WarehouseConfig, base, overrides)
        if env_id == "warehouse-fixed8" and cfg.item_lifetime is None:
            raise ValueError("warehouse-fixed8 requires an item lifetime")
        return ResolvedEnv(
            env_id=cfg.env_id,
            config=cfg,
            descriptor=warehouse.descriptor_for(cfg),
            default_k=8,
            default_aip_arch="gru",
            default_obs_stack=8,
            make_global=lambda: warehouse.WarehouseGlobalSim(cfg),
            make_local=lambda: warehouse.WarehouseLocalSim(cfg),
        )
    if env_id == "traffic":
        cfg = _apply_overrides(traffic.TrafficConfig, {}, overrides)
        return ResolvedEnv(
            env_id=cfg.env_id,
            config=cfg,
            descriptor=traffic.descriptor_for(cfg),
            default_k=4,
            default_aip_arch="ff",
            default_obs_stack=1,
            make_global=lambda: traffic.TrafficGlobalSim(cfg),
            make_local=lambda: traffic.TrafficLocalSim(cfg),
        )
    if env_id == "toy-dbn":
        cfg = _apply_overrides(exact.ToyDbnConfig, {}, overrides)
        model = exact.ToyDbnModel(cfg)
        sim = exact.ToyDbnSim(model)
        return ResolvedEnv(
            env_id="toy-dbn",
            config=cfg,
            descriptor=sim.descriptor,
            default_k=8,
            default_aip_arch="gru",
            default_obs_stack=2,
            make_global=lambda: exact.ToyDbnSim(model),
            make_local=lambda: exact.ToyDbnLocalSim(model),
            toy_model=model,
        )
    raise ValueError(f"unknown environment {env_id!r}; known: {ENV_IDS}")
