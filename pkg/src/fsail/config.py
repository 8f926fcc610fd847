"""Experiment configuration files.

A configuration is a JSON object with these sections, every one optional::

    {
      "format_version": 1,
      "out_dir": "runs/example",
      "data_dir": "data",
      "seeds": [0, 1, 2],
      "schedule": {"q": 1, "base_demos": 300, "eval_episodes": 25,
                   "n_base_tasks": 10, "tasks_per_session": 1},
      "train": {"method": "topic", "base_epochs": 30, "base_lr": 0.001,
                "stage2_epochs": 5, "stage2_lr": 0.001, "fewshot_epoch_scale": 30,
                "batch_size": 32, "lam1": 0.2, "lam2": 0.8,
                "include_base_nodes": true, "reg_mu": 1.0, "horizon": 8},
      "model": {"width": 32, "layers": 2, "heads": 2, "ff_dim": 64,
                "n_prompts": 5, "projection": "average_pooling"},
      "env": {"grid": 12, "view_size": 16, "n_distractors": 2}
    }

Unknown keys at any level are rejected so that typos never silently fall
back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .env import Catalog, EnvParams, default_catalog
from .harness import SessionSchedule, TrainConfig
from .policy import ModelConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleSettings:
    q: int = 1
    base_demos: int = 300
    eval_episodes: int = 25
    n_base_tasks: int = 10
    tasks_per_session: int = 1


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"model", "env", "seed"}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"grid", "view_size", "max_tokens", "n_planes",
                                                       "vocab_size"}
_ENV_KEYS = {"grid", "view_size", "n_distractors"}
_SCHEDULE_KEYS = {f.name for f in fields(ScheduleSettings)}
_TOP_KEYS = {"format_version", "out_dir", "data_dir", "seeds", "schedule", "train", "model", "env"}


def _check_keys(section: str, got: dict, allowed: set):
    if not isinstance(got, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = sorted(set(got) - allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}; "
                          f"allowed: {', '.join(sorted(allowed))}")


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: str = "runs"
    data_dir: str = "data"
    seeds: tuple = (0,)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    env: dict = field(default_factory=dict)
    format_version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.format_version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config format_version {self.format_version}")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        # build everything once so invalid values fail at load time
        try:
            self.train_config(self.seeds[0])
            self.session_schedule(self.seeds[0])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    # -- parsing -----------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _check_keys("config", raw, _TOP_KEYS)
        sched = raw.get("schedule", {})
        _check_keys("schedule", sched, _SCHEDULE_KEYS)
        for name, allowed in (("train", _TRAIN_KEYS), ("model", _MODEL_KEYS), ("env", _ENV_KEYS)):
            _check_keys(name, raw.get(name, {}), allowed)
        seeds = raw.get("seeds", [0])
        if not isinstance(seeds, list) or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise ConfigError("seeds must be a list of non-negative integers")
        return cls(out_dir=str(raw.get("out_dir", "runs")), data_dir=str(raw.get("data_dir", "data")),
                   seeds=tuple(seeds), schedule=ScheduleSettings(**sched),
                   train=dict(raw.get("train", {})), model=dict(raw.get("model", {})),
                   env=dict(raw.get("env", {})),
                   format_version=raw.get("format_version", CONFIG_VERSION))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {"format_version": self.format_version, "out_dir": self.out_dir,
                "data_dir": self.data_dir, "seeds": list(self.seeds),
                "schedule": {f.name: getattr(self.schedule, f.name) for f in fields(ScheduleSettings)},
                "train": dict(self.train), "model": dict(self.model), "env": dict(self.env)}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    # -- overrides ----------------------------------------------------------

    def with_overrides(self, *, method: Optional[str] = None, seed: Optional[int] = None,
                       q: Optional[int] = None, out_dir: Optional[str] = None,
                       **section_updates) -> "ExperimentConfig":
        cfg = self
        if method is not None:
            cfg = replace(cfg, train={**cfg.train, "method": method})
        if seed is not None:
            cfg = replace(cfg, seeds=(seed,))
        if q is not None:
            cfg = replace(cfg, schedule=replace(cfg.schedule, q=q))
        if out_dir is not None:
            cfg = replace(cfg, out_dir=out_dir)
        for section, updates in section_updates.items():
            if section == "schedule":
                cfg = replace(cfg, schedule=replace(cfg.schedule, **updates))
            else:
                cfg = replace(cfg, **{section: {**getattr(cfg, section), **updates}})
        return cfg

    # -- resolution ------------------------------------------------------------

    @property
    def method(self) -> str:
        return self.train.get("method", "topic")

    def env_params(self) -> EnvParams:
        return EnvParams(**self.env)

    def model_config(self) -> ModelConfig:
        env = self.env_params()
        return ModelConfig(grid=env.grid, view_size=env.view_size, max_tokens=env.max_tokens,
                           **self.model)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, model=self.model_config(), env=self.env_params(), **self.train)

    def catalog(self) -> Catalog:
        full = default_catalog()
        n = self.schedule.n_base_tasks
        if not 0 <= n <= len(full.base):
            raise ValueError(f"n_base_tasks must lie in [0, {len(full.base)}]")
        return Catalog(list(full.base[:n]), list(full.incremental))

    def session_schedule(self, seed: int) -> SessionSchedule:
        s = self.schedule
        if s.tasks_per_session < 1:
            raise ValueError("tasks_per_session must be positive")
        return SessionSchedule.from_catalog(self.catalog(), s.tasks_per_session, q=s.q,
                                            base_demos=s.base_demos,
                                            eval_episodes=s.eval_episodes, seed=seed)
