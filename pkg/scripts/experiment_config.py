#!/usr/bin/env python3
"""
Experiment Configuration
Declarative description of one distillation run, loaded from a JSON file
with nested sections and overridden by dotted keys from the command line.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from kd_datasets import DatasetSpec
from kd_logging import get_logger
from staged_backbones import ARCHITECTURES

logger = get_logger(__name__)

Mode = Literal["unikd", "kd_only", "mse_only", "hybrid_kd_mse", "ce_only", "fdp_only"]
MODES: Tuple[str, ...] = ("unikd", "kd_only", "mse_only", "hybrid_kd_mse", "ce_only", "fdp_only")

# (alpha, beta) used for each benchmark family
LOSS_WEIGHT_PRESETS: Dict[str, Tuple[float, float]] = {
    "cifar100": (0.1, 0.1),
    "imagenet": (1.0, 1.0),
    "coco": (1.0, 1.0),
}


class ConfigError(ValueError):
    """Config file missing, malformed or invalid"""


def _check_architecture(name: str) -> str:
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture '{name}' (known: {sorted(ARCHITECTURES)})")
    return name


def _stage_sides(architecture: str, input_size: int) -> List[int]:
    return [shape[2] for shape in ARCHITECTURES[architecture].stage_shapes(1, input_size)]


def _integer_ratios(sides: List[int]) -> bool:
    return all(shallow % deep == 0 for shallow, deep in zip(sides, sides[1:]))


class TeacherSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    architecture: str = "resnet_tiny_teacher"
    checkpoint: Optional[str] = None

    @field_validator("architecture")
    @classmethod
    def _known_architecture(cls, value: str) -> str:
        return _check_architecture(value)


class StudentSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    architecture: str = "resnet_tiny_student"
    # a copied student matches the teacher exactly only in eval mode; in
    # training its batch norm uses batch statistics
    init_from_teacher: bool = False

    @field_validator("architecture")
    @classmethod
    def _known_architecture(cls, value: str) -> str:
        return _check_architecture(value)


class LossSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(default=0.1, ge=0.0, allow_inf_nan=False)
    beta: float = Field(default=0.1, ge=0.0, allow_inf_nan=False)
    tau: float = Field(default=4.0, gt=0.0, allow_inf_nan=False)
    weights_preset: Optional[Literal["cifar100", "imagenet", "coco"]] = None

    @model_validator(mode="after")
    def _apply_preset(self) -> "LossSection":
        # explicit alpha/beta keys win over the preset
        if self.weights_preset is not None:
            alpha, beta = LOSS_WEIGHT_PRESETS[self.weights_preset]
            if "alpha" not in self.model_fields_set:
                self.alpha = alpha
            if "beta" not in self.model_fields_set:
                self.beta = beta
        return self


class OptimizerSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    family: Literal["sgd-momentum"] = "sgd-momentum"
    learning_rate: float = Field(default=0.05, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    milestones: List[float] = Field(default_factory=lambda: [0.5, 0.75])
    gamma: float = Field(default=0.1, gt=0.0)

    @field_validator("milestones")
    @classmethod
    def _check_milestones(cls, value: List[float]) -> List[float]:
        if any(not 0.0 < m <= 1.0 for m in value):
            raise ValueError(f"milestones are fractions of the epoch budget in (0, 1], got {value}")
        return sorted(value)

    def milestone_epochs(self, epochs: int) -> List[int]:
        return sorted({int(fraction * epochs) for fraction in self.milestones if int(fraction * epochs) > 0})


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    teacher: TeacherSection = Field(default_factory=TeacherSection)
    student: StudentSection = Field(default_factory=StudentSection)
    loss: LossSection = Field(default_factory=LossSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    batch_size: int = Field(default=64, ge=1)
    epochs: int = Field(default=30, ge=1)
    seed: int = Field(default=0, ge=0)
    device: str = "auto"
    dtype: Literal["float64", "float32"] = "float64"
    mode: Mode = "unikd"
    detach_teacher_distribution: bool = False
    out_dir: str = "runs/default"
    num_workers: int = Field(default=0, ge=0)
    log_every: int = Field(default=1, ge=1)
    progress: bool = True

    @model_validator(mode="after")
    def _check_student_init(self) -> "ExperimentConfig":
        if self.student.init_from_teacher and self.student.architecture != self.teacher.architecture:
            raise ValueError("student.init_from_teacher needs the student and teacher architectures to match")
        return self

    @model_validator(mode="after")
    def _check_fusable_input(self) -> "ExperimentConfig":
        if not self.uses_fusion:
            return self
        for role in ("teacher", "student"):
            architecture = getattr(self, role).architecture
            sides = _stage_sides(architecture, self.dataset.input_size)
            if not _integer_ratios(sides):
                raise ValueError(
                    f"dataset.input_size {self.dataset.input_size} gives {role} stages of {sides}; "
                    "fusion needs each stage side to divide the previous one"
                )
        return self

    @property
    def needs_teacher(self) -> bool:
        return self.mode != "ce_only"

    @property
    def uses_fusion(self) -> bool:
        """Both fusion stacks are built: unikd, or ce_only reporting against a teacher"""
        return self.mode == "unikd" or (self.mode == "ce_only" and self.teacher.checkpoint is not None)


def _set_dotted(target: Dict[str, Any], dotted_key: str, value: Any) -> None:
    parts = dotted_key.split(".")
    node = target
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"cannot override '{dotted_key}': '{part}' is not a section")
        node = child
    node[parts[-1]] = value


def config_from_mapping(raw: Mapping[str, Any], overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    data = json.loads(json.dumps(raw))
    overrides = dict(overrides or {})
    if "loss.weights_preset" in overrides:
        # a preset chosen by override replaces weights not overridden alongside it
        loss = data.get("loss")
        if isinstance(loss, dict):
            for weight in ("alpha", "beta"):
                if f"loss.{weight}" not in overrides:
                    loss.pop(weight, None)
    for key, value in overrides.items():
        _set_dotted(data, key, value)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config:\n{exc}") from exc


def load_config(path: Optional[Union[str, Path]], overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Read a JSON config file (or start from defaults) and apply overrides"""
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    cfg = config_from_mapping(raw, overrides)
    logger.debug("config_loaded", path=str(path) if path else None, mode=cfg.mode, seed=cfg.seed)
    return cfg


def with_overrides(cfg: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    return config_from_mapping(cfg.model_dump(mode="json"), overrides)


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.model_dump(mode="json"), indent=2) + "\n")
    return path
