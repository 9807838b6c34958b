"""JSON experiment configuration with strict key checking."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import schedule as sched
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    steps: int = sched.DEFAULT_STEPS
    beta_first: float = sched.DEFAULT_BETA_FIRST
    beta_last: float = sched.DEFAULT_BETA_LAST
    lam: float = sched.DEFAULT_LAMBDA

    def build(self) -> sched.Schedule:
        return sched.build_schedule(self.steps, self.beta_first, self.beta_last, self.lam)


@dataclass
class Config:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    presets: str | None = None
    seed: int = 0
    white_level: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)


_SCHEDULE_KEYS = {"steps": "steps", "beta_first": "beta_first", "beta_last": "beta_last", "lambda": "lam"}
_TOP_KEYS = {"schedule", "presets", "seed", "white_level", "train", "paths"}


def _reject_unknown(section: str, got, allowed):
    extra = sorted(set(got) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(extra)}")


def config_from_dict(raw: dict) -> Config:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown("config", raw, _TOP_KEYS)
    cfg = Config()
    if "schedule" in raw:
        sec = raw["schedule"]
        _reject_unknown("schedule", sec, _SCHEDULE_KEYS)
        cfg.schedule = ScheduleConfig(**{_SCHEDULE_KEYS[k]: v for k, v in sec.items()})
        try:
            cfg.schedule.build()
        except ValueError as e:
            raise ConfigError(f"schedule: {e}") from e
    if "train" in raw:
        sec = raw["train"]
        _reject_unknown("train", sec, [f.name for f in fields(TrainConfig)])
        try:
            cfg.train = TrainConfig(**sec)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"train: {e}") from e
    for key in ("presets", "seed", "white_level", "paths"):
        if key in raw:
            setattr(cfg, key, raw[key])
    if not 0 < cfg.white_level <= 1:
        raise ConfigError("white_level must lie in (0, 1]")
    return cfg


def load_config(path=None) -> Config:
    if path is None:
        return Config()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from e
    return config_from_dict(raw)
