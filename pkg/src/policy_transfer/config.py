"""Experiment configuration: one JSON document shared by every CLI stage."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .cargoal_env import EnvParams, Task, default_base_tasks, default_target_task
from .math_core import ConfigurationError
from .optim import CemConfig, SgdConfig
from .pipelines import METHODS, AdaptSpec, PretrainSpec


@dataclass(frozen=True)
class CollectSpec:
    budget: int = 2000
    noise: float = 3.0

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigurationError("collect.budget must be >= 1")
        if self.noise < 0:
            raise ConfigurationError("collect.noise must be >= 0")


@dataclass(frozen=True)
class EvalSpec:
    n_episodes: int = 100
    mode: str = "auto"

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ConfigurationError("eval.n_episodes must be >= 1")
        if self.mode not in ("auto", "mean", "sample"):
            raise ConfigurationError("eval.mode must be auto, mean or sample")


@dataclass(frozen=True)
class SweepSpec:
    param: str = "epsilon"
    values: tuple = (0.0, 0.05, 0.1, 0.2)

    def __post_init__(self):
        if self.param not in ("epsilon", "alpha", "demo_budget"):
            raise ConfigurationError("sweep.param must be epsilon, alpha or demo_budget")
        if len(self.values) == 0:
            raise ConfigurationError("sweep.values must not be empty")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    env: EnvParams = EnvParams()
    base_tasks: tuple = field(default_factory=lambda: tuple(default_base_tasks()))
    target_task: Task = field(default_factory=default_target_task)
    pretrain: dict = field(default_factory=dict)
    collect: CollectSpec = CollectSpec()
    adapt: dict = field(default_factory=lambda: {"method": "hard_switch"})
    eval: EvalSpec = EvalSpec()
    sweep: SweepSpec = SweepSpec()

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigurationError("seed must be a non-negative integer")
        # validate eagerly so bad configs fail before any work is done
        self.pretrain_spec()
        self.adapt_spec()

    # ---- derived specs
    def pretrain_spec(self) -> PretrainSpec:
        d = dict(self.pretrain)
        kw = {k: v for k, v in d.items() if k not in ("bc", "cem", "hidden")}
        if "hidden" in d:
            kw["hidden"] = tuple(d["hidden"])
        if "bc" in d:
            kw["bc"] = SgdConfig(**d["bc"])
        if "cem" in d:
            kw["cem"] = CemConfig(**d["cem"])
        try:
            return PretrainSpec(base_tasks=tuple(self.base_tasks), seed=self.seed, **kw)
        except TypeError as e:
            raise ConfigurationError(f"pretrain: {e}") from e

    def adapt_spec(self, **overrides) -> AdaptSpec:
        d = {**self.adapt, **{k: v for k, v in overrides.items() if v is not None}}
        if "method" not in d:
            raise ConfigurationError(f"adapt.method is required; valid methods: {', '.join(METHODS)}")
        kw = {k: v for k, v in d.items() if k not in ("cem", "sgd", "w_hidden")}
        if "w_hidden" in d:
            kw["w_hidden"] = tuple(d["w_hidden"])
        if d.get("cem") is not None:
            kw["cem"] = CemConfig(**d["cem"])
        if d.get("sgd") is not None:
            kw["sgd"] = SgdConfig(**d["sgd"])
        kw.setdefault("demo_budget", self.collect.budget)
        try:
            return AdaptSpec(target_task=self.target_task, seed=self.seed, **kw)
        except TypeError as e:
            raise ConfigurationError(f"adapt: {e}") from e

    # ---- serialisation
    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "env": asdict(self.env),
            "base_tasks": [t.to_dict() for t in self.base_tasks],
            "target_task": self.target_task.to_dict(),
            "pretrain": json.loads(json.dumps(self.pretrain)),
            "collect": asdict(self.collect),
            "adapt": json.loads(json.dumps(self.adapt)),
            "eval": asdict(self.eval),
            "sweep": {"param": self.sweep.param, "values": list(self.sweep.values)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigurationError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in d:
            raise ConfigurationError("config must set 'seed'")
        try:
            kw = {"seed": d["seed"]}
            if "env" in d:
                kw["env"] = EnvParams(**d["env"])
            if "base_tasks" in d:
                kw["base_tasks"] = tuple(Task.from_dict(t) for t in d["base_tasks"])
            if "target_task" in d:
                kw["target_task"] = Task.from_dict(d["target_task"])
            for key, typ in (("collect", CollectSpec), ("eval", EvalSpec)):
                if key in d:
                    kw[key] = typ(**d[key])
            if "sweep" in d:
                s = d["sweep"]
                kw["sweep"] = SweepSpec(s.get("param", "epsilon"), tuple(s.get("values", SweepSpec.values)))
            for key in ("pretrain", "adapt"):
                if key in d:
                    if not isinstance(d[key], dict):
                        raise ConfigurationError(f"{key} must be an object")
                    kw[key] = d[key]
            return cls(**kw)
        except (TypeError, KeyError) as e:
            raise ConfigurationError(f"invalid config: {e}") from e

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        if seed is None:
            return self
        return ExperimentConfig.from_dict({**self.to_dict(), "seed": seed})

    def hash(self) -> str:
        """Short digest of everything except the seed."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            d = json.load(f)
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e.strerror}") from e
    except ValueError as e:
        raise ConfigurationError(f"config {path} is not valid JSON: {e}") from e
    return ExperimentConfig.from_dict(d)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=1)
        f.write("\n")
