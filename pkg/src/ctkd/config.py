"""Experiment configuration: schema, defaults, YAML loading and echo."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .curriculum import CurriculumSchedule
from .distill import DEFAULT_HIDDEN, DEFAULT_TAU_INIT, DEFAULT_TAU_RANGE

STRATEGY_ALIASES = {
    "cosine": "cosine",
    "linear": "linear",
    "fixed": "fixed_lambda",
    "fixed_lambda": "fixed_lambda",
    "delayed": "delayed_fixed",
    "delayed_fixed": "delayed_fixed",
}


class ConfigError(ValueError):
    """Every problem found in a config, reported together."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetConfig(_Section):
    kind: Literal["blobs", "idx", "cache"] = "blobs"
    # blobs
    classes: int = Field(10, gt=0)
    dim: int = Field(20, gt=0)
    per_class: int = Field(200, gt=0)
    test_per_class: int = Field(100, gt=0)
    spread: float = Field(1.0, ge=0)
    center_scale: float = Field(1.0, gt=0)
    clusters_per_class: int = Field(1, gt=0)
    seed: int = 0
    # idx
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    # cache written by gen-data
    path: Optional[str] = None
    augment: bool = False
    pad: int = Field(2, ge=0)
    flip_prob: float = Field(0.5, ge=0, le=1)

    @model_validator(mode="after")
    def _sources(self):
        problems = []
        if self.kind == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if getattr(self, key) is None:
                    problems.append(f"dataset.{key} is required for kind=idx")
        if self.kind == "cache" and self.path is None:
            problems.append("dataset.path is required for kind=cache")
        if problems:
            raise ValueError("; ".join(problems))
        return self


class OptimizerConfig(_Section):
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    milestones: list[float] = Field(default_factory=lambda: [0.625, 0.75, 0.875])
    decay: float = Field(10.0, ge=1)

    @model_validator(mode="after")
    def _fractions(self):
        if any(not 0 < m <= 1 for m in self.milestones):
            raise ValueError("optimizer.milestones are fractions of total epochs in (0, 1]")
        return self


class ModelConfig(_Section):
    arch: Literal["linear", "mlp", "small_cnn"] = "linear"
    hidden: list[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _hidden(self):
        if self.arch == "mlp" and not self.hidden:
            raise ValueError("mlp needs at least one hidden width")
        if self.arch != "mlp" and self.hidden:
            raise ValueError(f"{self.arch} takes no hidden widths")
        if any(h <= 0 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        return self


class TeacherConfig(ModelConfig):
    arch: Literal["linear", "mlp", "small_cnn"] = "mlp"
    hidden: list[int] = Field(default_factory=lambda: [64])
    checkpoint: str = "runs/teacher/teacher.npz"
    epochs: int = Field(30, ge=0)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)


class TemperatureConfig(_Section):
    kind: Literal["global", "instance"] = "global"
    tau_init: float = Field(DEFAULT_TAU_INIT, gt=0)
    tau_range: float = Field(DEFAULT_TAU_RANGE, gt=0)
    hidden: int = Field(DEFAULT_HIDDEN, gt=0)
    init: float = 0.0


class CurriculumConfig(_Section):
    strategy: str = "cosine"
    lambda_min: float = 0.0
    lambda_max: float = 1.0
    e_loops: int = 10
    value: Optional[float] = None
    delay_tau: Optional[float] = None

    @model_validator(mode="after")
    def _schedule(self):
        if self.strategy not in STRATEGY_ALIASES:
            raise ValueError(f"curriculum.strategy must be one of {sorted(set(STRATEGY_ALIASES))}")
        strategy = STRATEGY_ALIASES[self.strategy]
        if strategy == "fixed_lambda":
            value = self.lambda_max if self.value is None else self.value
            problems = _schedule_problems(strategy, value, value, 1, value, None)
        elif strategy == "delayed_fixed":
            problems = _schedule_problems(strategy, self.lambda_min, self.lambda_max,
                                          self.e_loops, self.lambda_max if self.value is None
                                          else self.value,
                                          1.0 if self.delay_tau is None else self.delay_tau)
        else:
            problems = _schedule_problems(strategy, self.lambda_min, self.lambda_max,
                                          self.e_loops, None, None)
        if problems:
            raise ValueError("; ".join(f"curriculum: {p}" for p in problems))
        return self

    def schedule(self) -> CurriculumSchedule:
        strategy = STRATEGY_ALIASES[self.strategy]
        if strategy == "fixed_lambda":
            return CurriculumSchedule.fixed(self.lambda_max if self.value is None else self.value)
        if strategy == "delayed_fixed":
            return CurriculumSchedule.delayed(
                self.lambda_max if self.value is None else self.value,
                1.0 if self.delay_tau is None else self.delay_tau, self.e_loops)
        return CurriculumSchedule(strategy, self.lambda_min, self.lambda_max, self.e_loops)


def _schedule_problems(strategy, lo, hi, loops, value, delay_tau) -> list[str]:
    try:
        CurriculumSchedule(strategy, lo, hi, loops, value, delay_tau)
    except ValueError as exc:
        return str(exc).split("; ")
    return []


class LossConfig(_Section):
    alpha_ce: float = Field(0.1, ge=0)
    alpha_kd: float = Field(0.9, ge=0)


class ExperimentConfig(_Section):
    """Everything needed to reproduce a run."""

    seed: int = Field(0, ge=0)
    out: str = "runs/ctkd"
    epochs: int = Field(60, ge=0)
    batch_size: int = Field(64, gt=0)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    teacher: TeacherConfig = Field(default_factory=TeacherConfig)
    student: ModelConfig = Field(default_factory=ModelConfig)
    temperature: Optional[TemperatureConfig] = Field(default_factory=TemperatureConfig)
    tau_fixed: Optional[float] = Field(None, gt=0)
    curriculum: CurriculumConfig = Field(default_factory=CurriculumConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    # wall-clock varies run to run; kept out of metrics.csv unless asked for
    record_wallclock: bool = False

    @model_validator(mode="after")
    def _one_tau_source(self):
        if self.tau_fixed is not None and self.temperature is not None:
            # a fixed override always wins; drop the module so exactly one drives tau
            object.__setattr__(self, "temperature", None)
        if self.tau_fixed is None and self.temperature is None:
            raise ValueError("either temperature or tau_fixed must be set")
        return self

    @property
    def learnable(self) -> bool:
        return self.tau_fixed is None

    def echo(self) -> dict:
        return self.model_dump(mode="json")

    def digest(self) -> str:
        """Stable hash of everything except the output location."""
        d = self.echo()
        d.pop("out", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **changes) -> "ExperimentConfig":
        d = self.echo()
        for key, value in changes.items():
            if value is not None:
                d[key] = value
        if changes.get("tau_fixed") is not None:
            d["temperature"] = None
        return parse_config(d)


def _format_errors(exc: ValidationError) -> list[str]:
    problems = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        msg = err["msg"]
        if msg.startswith("Value error, "):
            msg = msg[len("Value error, "):]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        problems.append(f"{loc}: {msg}" if loc else msg)
    return problems


def parse_config(data: dict | None) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc.strerror}"]) from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return parse_config(data)


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.echo(), sort_keys=False))
    return path
