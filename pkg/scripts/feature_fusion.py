#!/usr/bin/env python3
"""
Adaptive Features Fusion
Gated top-down aggregation of residual-stage features into one fused map.

Each pair step expands the shallow feature to the deep channel count with
a 1x1 convolution, upsamples the deep feature (nearest) to the shallow
resolution, and mixes the two with a sigmoid gate predicted by a 3x3
convolution over their channel concatenation:

    out = g * E(shallow) + (1 - g) * Up(deep)
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from kd_logging import get_logger

logger = get_logger(__name__)

GATE_SATURATION_BIAS = 50.0


class FusionContractError(ValueError):
    """Incompatible feature shapes for fusion"""

    def __init__(self, message: str, level: Optional[int] = None):
        super().__init__(message)
        self.level = level


@dataclass
class FeaturePyramid:
    """Ordered stage features F_1..F_L, shallow to deep"""
    stages: List[torch.Tensor]

    def __post_init__(self):
        if len(self.stages) < 2:
            raise FusionContractError(f"a pyramid needs at least 2 stages, got {len(self.stages)}")
        batch = self.stages[0].shape[0]
        for index, stage in enumerate(self.stages):
            if stage.dim() != 4:
                raise FusionContractError(f"stage {index} must be (B, C, H, W), got {tuple(stage.shape)}")
            if stage.shape[0] != batch:
                raise FusionContractError(f"stage {index} has batch {stage.shape[0]}, expected {batch}")
        for index in range(len(self.stages) - 1):
            shallow, deep = self.stages[index], self.stages[index + 1]
            if deep.shape[2] > shallow.shape[2] or deep.shape[3] > shallow.shape[3]:
                raise FusionContractError(
                    f"stage {index + 1} resolution {tuple(deep.shape[2:])} exceeds stage {index} "
                    f"resolution {tuple(shallow.shape[2:])}"
                )

    @property
    def depth(self) -> int:
        return len(self.stages)

    @property
    def channels(self) -> List[int]:
        return [int(stage.shape[1]) for stage in self.stages]

    def shapes(self) -> List[Tuple[int, ...]]:
        return [tuple(stage.shape) for stage in self.stages]


@dataclass
class FusedRepresentation:
    feature: torch.Tensor
    gate: torch.Tensor


class GatedFusionPair(nn.Module):
    """One fusion step: shallow (C_a, H_a, W_a) + deep (C_b, H_b, W_b) -> (C_b, H_a, W_a)"""

    def __init__(self, shallow_channels: int, deep_channels: int):
        super().__init__()
        self.shallow_channels = shallow_channels
        self.deep_channels = deep_channels
        self.expander = nn.Conv2d(shallow_channels, deep_channels, kernel_size=1)
        self.gate_conv = nn.Conv2d(2 * deep_channels, deep_channels, kernel_size=3, padding=1)
        nn.init.zeros_(self.gate_conv.bias)

    def _check_inputs(self, shallow: torch.Tensor, deep: torch.Tensor) -> None:
        if shallow.dim() != 4 or deep.dim() != 4:
            raise FusionContractError(
                f"expected 4-d inputs, got shallow {tuple(shallow.shape)} and deep {tuple(deep.shape)}"
            )
        if shallow.shape[0] != deep.shape[0]:
            raise FusionContractError(f"batch mismatch: {shallow.shape[0]} vs {deep.shape[0]}")
        if shallow.shape[1] != self.shallow_channels:
            raise FusionContractError(
                f"shallow feature has {shallow.shape[1]} channels, expander expects {self.shallow_channels}"
            )
        if deep.shape[1] != self.deep_channels:
            raise FusionContractError(
                f"deep feature has {deep.shape[1]} channels, fusion expects {self.deep_channels}"
            )
        (h_a, w_a), (h_b, w_b) = shallow.shape[2:], deep.shape[2:]
        if h_a < h_b or w_a < w_b:
            raise FusionContractError(f"shallow resolution {(h_a, w_a)} is coarser than deep {(h_b, w_b)}")
        if h_a % h_b or w_a % w_b:
            raise FusionContractError(f"spatial ratio {(h_a, w_a)} / {(h_b, w_b)} is not an integer")

    def forward(self, shallow: torch.Tensor, deep: torch.Tensor) -> FusedRepresentation:
        self._check_inputs(shallow, deep)
        expanded = self.expander(shallow)
        upsampled = F.interpolate(deep, size=tuple(shallow.shape[2:]), mode="nearest")
        gate = torch.sigmoid(self.gate_conv(torch.cat([expanded, upsampled], dim=1)))
        feature = gate * expanded + (1.0 - gate) * upsampled
        return FusedRepresentation(feature=feature, gate=gate)


def fuse_pair(shallow: torch.Tensor, deep: torch.Tensor, params: GatedFusionPair) -> FusedRepresentation:
    return params(shallow, deep)


@torch.no_grad()
def saturate_gate(pair: GatedFusionPair, towards_shallow: bool, magnitude: float = GATE_SATURATION_BIAS) -> None:
    """Test hook: pin the gate at ~1 (shallow branch) or ~0 (deep branch)"""
    pair.gate_conv.weight.zero_()
    pair.gate_conv.bias.fill_(magnitude if towards_shallow else -magnitude)


class AdaptiveFeatureFusion(nn.Module):
    """Top-down cascade of GatedFusionPair modules over a whole pyramid.

    Every pair fuses into `target_channels`. When the deepest stage does
    not already carry that many channels, a 1x1 entry convolution lifts
    it first; otherwise the entry is the identity.
    """

    def __init__(self, stage_channels: Sequence[int], target_channels: Optional[int] = None):
        super().__init__()
        if len(stage_channels) < 2:
            raise FusionContractError(f"need at least 2 stages, got {len(stage_channels)}")
        self.stage_channels = list(stage_channels)
        self.target_channels = target_channels or self.stage_channels[-1]
        if self.target_channels == self.stage_channels[-1]:
            self.entry = nn.Identity()
        else:
            self.entry = nn.Conv2d(self.stage_channels[-1], self.target_channels, kernel_size=1)
        self.pairs = nn.ModuleList(
            GatedFusionPair(channels, self.target_channels) for channels in self.stage_channels[:-1]
        )

    def forward(self, pyramid: FeaturePyramid) -> FusedRepresentation:
        if pyramid.channels != self.stage_channels:
            raise FusionContractError(
                f"pyramid channels {pyramid.channels} do not match fusion stages {self.stage_channels}"
            )
        running = self.entry(pyramid.stages[-1])
        fused = None
        for level in range(pyramid.depth - 2, -1, -1):
            try:
                fused = self.pairs[level](pyramid.stages[level], running)
            except FusionContractError as exc:
                raise FusionContractError(f"level {level}: {exc}", level=level) from exc
            running = fused.feature
        return fused

    def output_shape(self, stage_shapes: Sequence[Tuple[int, ...]]) -> Tuple[int, int, int, int]:
        batch, _, height, width = stage_shapes[0]
        return (batch, self.target_channels, height, width)


def fuse_pyramid(p: FeaturePyramid, params_per_level: AdaptiveFeatureFusion) -> FusedRepresentation:
    return params_per_level(p)


def build_fusion(stage_channels: Sequence[int], target_channels: Optional[int], seed: int) -> AdaptiveFeatureFusion:
    """Build a fusion stack initialised from `seed` in a private RNG scope.

    Two stacks with equal shapes built from the same seed start identical.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        fusion = AdaptiveFeatureFusion(stage_channels, target_channels)
    logger.debug(
        "fusion_built",
        stage_channels=list(stage_channels),
        target_channels=fusion.target_channels,
        parameters=sum(p.numel() for p in fusion.parameters()),
    )
    return fusion
