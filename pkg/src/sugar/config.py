"""Run configuration: one JSON document drives every command.

Loading materializes every default, so the echoed config names each value
actually used; re-running a command from its echo reproduces the outputs
bit for bit (all randomness descends from the seed).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Any

from .datapipe import FilterThresholds, PipelineConfig
from .model import ModelConfig
from .sampler import GuidanceConfig
from .schedule import NoiseSchedule, make_linear_schedule
from .training import DropoutConfig, StrategyConfig


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class ScheduleSettings:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def build(self) -> NoiseSchedule:
        return make_linear_schedule(self.timesteps, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class PipelineSettings:
    n_subjects: int = 64
    n_real: int = 64
    frames: int = 8
    corruption_rate: float = 0.0
    lazy_rate: float = 0.0
    tau_identity: float = 0.6
    tau_text: float = 0.25
    tau_consistency: float = 0.85
    tau_flow: float = 0.3

    def build(self) -> PipelineConfig:
        return PipelineConfig(
            n_subjects=self.n_subjects,
            frames=self.frames,
            corruption_rate=self.corruption_rate,
            lazy_rate=self.lazy_rate,
            thresholds=FilterThresholds(
                tau_identity=self.tau_identity,
                tau_text=self.tau_text,
                tau_consistency=self.tau_consistency,
                tau_flow=self.tau_flow,
            ),
        )


@dataclass(frozen=True)
class GuidanceSettings:
    omega_I: float = 7.5
    omega_T: float = 7.5
    variant: str = "text_inner"
    t_bar: int = 1000
    drop_set: str = "none"
    steps: int = 50
    method: str = "ddim"

    def build(self) -> GuidanceConfig:
        return GuidanceConfig(
            omega_i=self.omega_I, omega_t=self.omega_T, variant=self.variant,
            t_bar=self.t_bar, drop_set=self.drop_set,
        )


@dataclass(frozen=True)
class SampleSettings:
    # request rows may override any GuidanceSettings field per request
    requests: tuple = ()
    count: int = 4  # auto-generated requests when none are given


@dataclass(frozen=True)
class AblateSettings:
    preset: str | None = None
    cells: tuple = ()
    samples_per_cell: int = 4
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/out"
    data_dir: str | None = None
    checkpoint: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    guidance: GuidanceSettings = field(default_factory=GuidanceSettings)
    sample: SampleSettings = field(default_factory=SampleSettings)
    ablate: AblateSettings = field(default_factory=AblateSettings)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def echo_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {
    "model": ModelConfig,
    "schedule": ScheduleSettings,
    "pipeline": PipelineSettings,
    "dropout": DropoutConfig,
    "strategy": StrategyConfig,
    "guidance": GuidanceSettings,
    "sample": SampleSettings,
    "ablate": AblateSettings,
}


def _build_section(cls, data: Any, name: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    if cls is ModelConfig:
        defaults = ModelConfig().to_dict()
        unknown = set(data) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
        merged = {**defaults, **data}
        try:
            return ModelConfig.from_dict(merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad section {name!r}: {exc}") from exc
    fields = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    if "requests" in data:
        data = {**data, "requests": tuple(data["requests"])}
    if "cells" in data:
        data = {**data, "cells": tuple(data["cells"])}
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad section {name!r}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"seed", "out", "data_dir", "checkpoint", *_SECTIONS}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {
        "seed": int(raw.get("seed", 0)),
        "out": str(raw.get("out", "runs/out")),
        "data_dir": raw.get("data_dir"),
        "checkpoint": raw.get("checkpoint"),
    }
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build_section(cls, raw.get(name), name)
    cfg = RunConfig(**kwargs)
    if cfg.guidance.t_bar > cfg.schedule.timesteps:
        raise ConfigError("guidance.t_bar exceeds schedule.timesteps")
    if cfg.model.timesteps != cfg.schedule.timesteps:
        raise ConfigError("model.timesteps must equal schedule.timesteps")
    if cfg.model.frames != cfg.pipeline.frames:
        raise ConfigError("model.frames must equal pipeline.frames")
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """New config with dotted-path overrides applied (e.g. 'guidance.omega_I')."""
    raw = cfg.to_dict()
    for path, value in overrides.items():
        parts = path.split(".")
        node = raw
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"override path {path!r} does not exist")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override path {path!r} does not exist")
        node[parts[-1]] = value
    return config_from_dict(raw)
