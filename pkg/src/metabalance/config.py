"""Experiment configuration: one YAML document, optionally overridden from the CLI."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigurationError


@dataclass
class DatasetConfig:
    synthetic: dict | None = None  # SyntheticSpec fields
    path: str | None = None  # raw log
    format: str | None = None  # format descriptor name or path
    processed: str | None = None  # directory written by `preprocess`
    min_user: int = 0
    min_item: int = 0
    fixpoint: bool = True
    ratios: tuple = (0.7, 0.1, 0.2)
    tasks: list | None = None  # [target, aux...]; default purchase + every auxiliary present
    seed: int = 0  # generation and split seed, independent of the training seed


@dataclass
class ModelSection:
    embedding_dim: int = 64
    shared_layers: tuple = (32, 16, 8)
    tower_layers: tuple = (64, 32)
    dropout: float = 0.5
    embedding_std: float = 0.01


@dataclass
class MethodConfig:
    name: str = "metabalance"
    params: dict = field(default_factory=lambda: {"strategy": "C", "relax_factor": 0.7, "beta": 0.9})


@dataclass
class OptimizerConfig:
    name: str = "adam"
    params: dict = field(default_factory=lambda: {"lr": 0.001})


@dataclass
class TrainingConfig:
    batch_size: int = 256
    negatives: int = 4
    max_epochs: int = 100
    patience: int = 20
    weight_decay: float = 1e-7
    loss_scales: list | None = None
    loss_jitter: float | None = None  # overrides the synthetic spec's value when set
    select_metric: str = "ndcg@10"
    eval_ks: tuple = (10, 20)
    candidates: str = "all"
    eval_workers: int = 1


@dataclass
class SweepConfig:
    strategies: list = field(default_factory=lambda: ["A", "B", "C"])
    relax_factors: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 10)])
    workers: int = 1


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    dataset: DatasetConfig = field(default_factory=lambda: DatasetConfig(synthetic={}))
    model: ModelSection = field(default_factory=ModelSection)
    method: MethodConfig = field(default_factory=MethodConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    trace: bool = False
    output_dir: str | None = None

    def __post_init__(self):
        if not isinstance(self.method.name, str) or not self.method.name:
            raise ConfigurationError("exactly one method must be selected")
        if self.training.candidates not in ("all", "mask-train-positives"):
            raise ConfigurationError(f"unknown candidate policy {self.training.candidates!r}")
        metric, _, k = self.training.select_metric.partition("@")
        if metric not in ("ndcg", "recall", "precision") or not k.isdigit():
            raise ConfigurationError(f"bad select_metric {self.training.select_metric!r}")
        if int(k) not in self.training.eval_ks:
            self.training.eval_ks = tuple(sorted({*self.training.eval_ks, int(k)}))
        src = [self.dataset.synthetic is not None, self.dataset.path is not None, self.dataset.processed is not None]
        if sum(src) != 1:
            raise ConfigurationError("dataset needs exactly one of: synthetic, path, processed")

    @property
    def select(self) -> tuple[str, int]:
        metric, _, k = self.training.select_metric.partition("@")
        return metric, int(k)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d or {}, "")

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"method.params.relax_factor": 0.5})``."""
        d = self.to_dict()
        for k, v in overrides.items():
            set_path(d, k, v)
        return ExperimentConfig.from_dict(d)


_SECTIONS = {
    "dataset": DatasetConfig, "model": ModelSection, "method": MethodConfig,
    "optimizer": OptimizerConfig, "training": TrainingConfig, "sweep": SweepConfig,
}


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where or 'config'}: expected a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigurationError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for k, v in d.items():
        sub = _SECTIONS.get(k) if cls is ExperimentConfig else None
        kwargs[k] = _build(sub, v, k) if sub is not None else copy.deepcopy(v)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{where or 'config'}: {exc}") from None


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigurationError(f"cannot set {dotted}: {k} is not a mapping")
    d[keys[-1]] = value


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    """Read a YAML config and apply ``key.path=value`` overrides (values parsed as YAML)."""
    try:
        d = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigurationError(f"override {item!r} must look like key.path=value")
        set_path(d, key.strip(), yaml.safe_load(raw))
    return ExperimentConfig.from_dict(d)
