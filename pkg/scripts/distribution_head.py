#!/usr/bin/env python3
"""
Feature Distribution Prediction
Maps a fused feature map to per-sample diagonal Gaussian parameters. One
head instance is shared by the teacher and student paths.
"""

from typing import Tuple, Union

import torch
import torch.nn as nn

from feature_fusion import FusedRepresentation
from kd_distributions import DiagGaussian, kl_diag

LOGVAR_BOUNDS: Tuple[float, float] = (-10.0, 10.0)

FeatureInput = Union[FusedRepresentation, torch.Tensor]


class DistributionHeadContractError(ValueError):
    """Feature does not fit the distribution head"""


class FeatureDistributionHead(nn.Module):
    """Global average pool -> flatten -> projection to k -> (mean, log-variance) heads"""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.projection = nn.Linear(in_channels, num_classes)
        self.mean_head = nn.Linear(num_classes, num_classes)
        self.logvar_head = nn.Linear(num_classes, num_classes)

    def forward(self, fused: FeatureInput) -> DiagGaussian:
        feature = fused.feature if isinstance(fused, FusedRepresentation) else fused
        if feature.dim() != 4:
            raise DistributionHeadContractError(f"expected (B, C, H, W) feature, got {tuple(feature.shape)}")
        if feature.shape[1] != self.in_channels:
            raise DistributionHeadContractError(
                f"feature has {feature.shape[1]} channels, head expects {self.in_channels}"
            )
        pooled = torch.flatten(self.pool(feature), start_dim=1)
        projected = self.projection(pooled)
        mean = self.mean_head(projected)
        logvar = torch.clamp(self.logvar_head(projected), *LOGVAR_BOUNDS)
        return DiagGaussian(mean=mean, var=torch.exp(logvar))


def predict_distribution(fused: FeatureInput, head: FeatureDistributionHead) -> DiagGaussian:
    return head(fused)


def feature_distribution_loss(
    student_fused: FeatureInput,
    teacher_fused: FeatureInput,
    head: FeatureDistributionHead,
    detach_teacher: bool = False,
) -> torch.Tensor:
    """Batch mean of KL(student || teacher) through the shared head.

    With detach_teacher the teacher-side distribution is a constant, so
    only the student path trains the head and nothing trains the teacher
    fusion.
    """
    student = head(student_fused)
    teacher = head(teacher_fused)
    if detach_teacher:
        teacher = DiagGaussian(mean=teacher.mean.detach(), var=teacher.var.detach())
    return kl_diag(student, teacher).mean()
