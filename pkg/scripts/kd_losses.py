#!/usr/bin/env python3
"""
Distillation Losses
Temperature softmax, logits KD, feature-MSE baseline and the weighted
total objective.

No tau^2 gradient compensation is applied to the logits term: with the
default tau = 4 its gradient is about 1/16 of the conventional scaled
form, which effectively lowers the learning rate seen by that term. Raise
beta to compensate.
"""

import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_TEMPERATURE = 4.0

Scalar = Union[float, torch.Tensor]


class LossContractError(ValueError):
    """Invalid loss inputs"""


class NonFiniteLogitsError(LossContractError):
    """Logits hold NaN or infinity"""


def _require_finite(name: str, tensor: torch.Tensor) -> None:
    if not bool(torch.isfinite(tensor).all()):
        raise NonFiniteLogitsError(f"{name} contains non-finite entries")


def _require_temperature(tau: float) -> None:
    if not (isinstance(tau, (int, float)) and math.isfinite(tau) and tau > 0):
        raise LossContractError(f"temperature must be a positive finite number, got {tau!r}")


def softmax_tau(z: torch.Tensor, tau: float) -> torch.Tensor:
    """Softmax of z / tau over the last dimension, max-shifted"""
    _require_temperature(tau)
    z = torch.as_tensor(z)
    if z.dim() < 1 or z.shape[-1] < 1:
        raise LossContractError(f"logits need at least one class, got shape {tuple(z.shape)}")
    _require_finite("logits", z)
    scaled = z / tau
    shifted = scaled - scaled.max(dim=-1, keepdim=True).values.detach()
    exp = torch.exp(shifted)
    return exp / exp.sum(dim=-1, keepdim=True)


@dataclass(frozen=True)
class LogitsBundle:
    teacher_logits: torch.Tensor
    student_logits: torch.Tensor
    tau: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.teacher_logits.shape != self.student_logits.shape:
            raise LossContractError(
                f"teacher logits {tuple(self.teacher_logits.shape)} and student logits "
                f"{tuple(self.student_logits.shape)} differ in shape"
            )
        if self.student_logits.dim() != 2:
            raise LossContractError(f"logits must be (batch, classes), got {tuple(self.student_logits.shape)}")
        _require_temperature(self.tau)
        _require_finite("teacher_logits", self.teacher_logits)
        _require_finite("student_logits", self.student_logits)


def logits_kd_loss(bundle: LogitsBundle) -> torch.Tensor:
    """Batch mean of KL(p_teacher(tau) || p_student(tau)).

    Teacher probabilities are constants: no gradient reaches the teacher
    logits.
    """
    teacher = bundle.teacher_logits.detach()
    teacher_probs = softmax_tau(teacher, bundle.tau)
    teacher_log_probs = F.log_softmax(teacher / bundle.tau, dim=-1)
    student_log_probs = F.log_softmax(bundle.student_logits / bundle.tau, dim=-1)
    return (teacher_probs * (teacher_log_probs - student_log_probs)).sum(dim=-1).mean()


def feature_mse_loss(
    teacher_feats: Sequence[torch.Tensor],
    student_feats: Sequence[torch.Tensor],
    adapters: Sequence[Callable[[torch.Tensor], torch.Tensor]],
) -> torch.Tensor:
    """Half the sum over layers of the per-layer element-mean squared residual"""
    if not (len(teacher_feats) == len(student_feats) == len(adapters)):
        raise LossContractError(
            f"need equal numbers of teacher features ({len(teacher_feats)}), student features "
            f"({len(student_feats)}) and adapters ({len(adapters)})"
        )
    if len(teacher_feats) == 0:
        raise LossContractError("at least one feature layer is required")

    total = None
    for index, (target, source, adapter) in enumerate(zip(teacher_feats, student_feats, adapters)):
        mapped = adapter(source)
        if mapped.shape != target.shape:
            raise LossContractError(
                f"layer {index}: adapted student feature {tuple(mapped.shape)} does not match "
                f"teacher feature {tuple(target.shape)}"
            )
        layer = (target.detach() - mapped).pow(2).mean()
        total = layer if total is None else total + layer
    return 0.5 * total


class FeatureRegressor(nn.Module):
    """1x1 convolution mapping a student stage to the teacher's channel count"""

    def __init__(self, student_channels: int, teacher_channels: int):
        super().__init__()
        self.student_channels = student_channels
        self.teacher_channels = teacher_channels
        if student_channels == teacher_channels:
            self.proj = nn.Identity()
        else:
            self.proj = nn.Conv2d(student_channels, teacher_channels, kernel_size=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)


def build_feature_regressors(student_channels: Sequence[int], teacher_channels: Sequence[int]) -> nn.ModuleList:
    if len(student_channels) != len(teacher_channels):
        raise LossContractError(
            f"stage count mismatch: student {len(student_channels)} vs teacher {len(teacher_channels)}"
        )
    return nn.ModuleList(
        FeatureRegressor(s, t) for s, t in zip(student_channels, teacher_channels)
    )


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise LossContractError(f"{name} must be finite and >= 0, got {value!r}")


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    fl: float
    logits_kl: float
    total: float
    alpha: float
    beta: float

    def recombined(self) -> float:
        return self.ce + self.alpha * self.fl + self.beta * self.logits_kl

    def as_record(self) -> Dict[str, float]:
        record = asdict(self)
        record.pop("alpha")
        record.pop("beta")
        return record


def _to_float(name: str, value: Scalar) -> float:
    number = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(number):
        raise LossContractError(f"{name} is not finite ({number})")
    return number


def total_loss(ce: Scalar, fl: Scalar, lk: Scalar, w: LossWeights) -> LossBreakdown:
    ce_value = _to_float("ce", ce)
    fl_value = _to_float("fl", fl)
    lk_value = _to_float("logits_kl", lk)
    return LossBreakdown(
        ce=ce_value,
        fl=fl_value,
        logits_kl=lk_value,
        total=ce_value + w.alpha * fl_value + w.beta * lk_value,
        alpha=w.alpha,
        beta=w.beta,
    )


def weighted_objective(ce: torch.Tensor, fl: torch.Tensor, lk: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Differentiable counterpart of total_loss"""
    return ce + w.alpha * fl + w.beta * lk
