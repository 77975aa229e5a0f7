"""Experiment configuration: nested dataclasses loaded from YAML.

Every field can be set from the file; unknown keys are rejected. See
``configs/`` for annotated examples.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

__all__ = [
    "BalancerConfig",
    "ConfigError",
    "ExperimentConfig",
    "ModelConfig",
    "OptimizerConfig",
    "OutputConfig",
    "TaskConfig",
    "TheoryConfig",
    "load_config",
]


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    bottom_hidden: list[int] = field(default_factory=lambda: [32])
    repr_dim: int = 16
    head_hidden: list[int] = field(default_factory=lambda: [8])


@dataclass
class TaskConfig:
    kind: str = "synthetic"  # synthetic | quadratic
    n_tasks: int = 3
    input_dim: int = 16
    conflict: float = 0.0
    noise_std: float = 0.1
    task_kinds: list[str] = field(default_factory=list)
    label_scales: list[float] = field(default_factory=list)
    # quadratic testbed
    centers: list[list[float]] | None = None
    curvatures: list[list[list[float]]] | None = None
    theta0: list[float] | None = None


@dataclass
class BalancerConfig:
    name: str = "multibalance"
    beta: float = 1.0
    rho: float = 0.1
    gamma: float = 0.01
    lambda0: list[float] | None = None
    cosine_mode: bool = True
    vaccine_rate: float = 0.01


@dataclass
class OptimizerConfig:
    name: str = "sgd"  # sgd | adam
    lr: float = 0.05
    adam_betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8


@dataclass
class OutputConfig:
    records: str = "runs/records.jsonl"
    manifest: str = "runs/manifest.json"
    timing: bool = False  # wall-clock column in record files (breaks bitwise reproducibility)


@dataclass
class TheoryConfig:
    lemma_instances: int = 100
    lemma_shape_a: list[int] = field(default_factory=lambda: [4, 3])
    lemma_shape_b: list[int] = field(default_factory=lambda: [5, 4])
    residual_batch_sizes: list[int] = field(default_factory=lambda: [8, 32, 128, 512])
    residual_seeds: int = 20
    pool_factor: int = 16
    certify_steps: int = 500
    stationarity_points: int = 50
    report: str = "runs/theory.jsonl"


@dataclass
class ExperimentConfig:
    seed: int = 0
    steps: int = 500
    batch_size: int = 32
    eval_size: int = 4096
    gradient_source: str = "representation"  # representation | parameter
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    balancer: BalancerConfig = field(default_factory=BalancerConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    theory: TheoryConfig = field(default_factory=TheoryConfig)
    sweep_betas: list[float] = field(default_factory=lambda: [1.0, 2.0, 5.0, 10.0])

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"balancer.name": "mgda"})``."""
        data = self.to_dict()
        for key, value in changes.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return from_dict(data)


_BALANCERS = {"multibalance", "mgda", "moco", "pcgrad", "gradvac", "graddrop", "dbmtl", "imtlg", "uncertainty", "vanilla"}
_PARAMETER_OK = {"mgda", "moco", "vanilla"}


def validate(cfg: ExperimentConfig) -> None:
    b, t = cfg.balancer, cfg.task
    if b.name not in _BALANCERS:
        raise ConfigError(f"unknown balancer {b.name!r}; choose from {sorted(_BALANCERS)}")
    if cfg.gradient_source not in ("representation", "parameter"):
        raise ConfigError("gradient_source must be 'representation' or 'parameter'")
    if cfg.gradient_source == "parameter" and b.name not in _PARAMETER_OK:
        raise ConfigError(f"balancer {b.name!r} only supports representation gradients")
    if t.kind not in ("synthetic", "quadratic"):
        raise ConfigError("task.kind must be 'synthetic' or 'quadratic'")
    if t.kind == "quadratic" and (t.centers is None or t.theta0 is None):
        raise ConfigError("quadratic tasks need task.centers and task.theta0")
    if cfg.optimizer.name not in ("sgd", "adam"):
        raise ConfigError("optimizer.name must be 'sgd' or 'adam'")
    if cfg.optimizer.lr < 0 or b.beta < 0 or b.rho < 0:
        raise ConfigError("learning rates and rho must be non-negative")
    if not 0.0 < b.gamma <= 1.0 or not 0.0 < b.vaccine_rate <= 1.0:
        raise ConfigError("EMA rates must lie in (0, 1]")
    if cfg.steps < 0 or cfg.batch_size < 1:
        raise ConfigError("steps must be >= 0 and batch_size >= 1")


def _build(cls, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name) if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


_NESTED = {
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "task"): TaskConfig,
    (ExperimentConfig, "balancer"): BalancerConfig,
    (ExperimentConfig, "optimizer"): OptimizerConfig,
    (ExperimentConfig, "output"): OutputConfig,
    (ExperimentConfig, "theory"): TheoryConfig,
}


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(data or {})
