#!/usr/bin/env python3
"""
Staged Residual Backbones
Small CIFAR-style residual networks that return the output of each
residual stage together with the logits, plus freezing, checksums and the
safetensors checkpoint format shared with the trainer.
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import load_file, save_file

from feature_fusion import FeaturePyramid
from kd_logging import get_logger

logger = get_logger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
BACKBONE_PREFIX = "backbone."


class BackboneContractError(ValueError):
    """Input does not match the backbone's declared shape"""


class CheckpointError(RuntimeError):
    """Checkpoint cannot be read or written"""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint does not match the expected architecture or class count"""


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    widths: Tuple[int, int, int]
    blocks_per_stage: int
    # trainable parameters excluding the classifier; the classifier adds
    # (widths[-1] + 1) per class
    published_backbone_parameters: int

    def parameter_count(self, num_classes: int) -> int:
        return self.published_backbone_parameters + (self.widths[-1] + 1) * num_classes

    def stage_shapes(self, batch: int, input_size: int) -> List[Tuple[int, int, int, int]]:
        shapes = []
        size = input_size
        for index, width in enumerate(self.widths):
            if index > 0:
                size = (size + 1) // 2
            shapes.append((batch, width, size, size))
        return shapes


ARCHITECTURES: Dict[str, ArchitectureSpec] = {
    "resnet_micro": ArchitectureSpec("resnet_micro", (4, 8, 16), 1, 5044),
    "resnet_tiny_student": ArchitectureSpec("resnet_tiny_student", (16, 32, 64), 1, 77392),
    "resnet_tiny_teacher": ArchitectureSpec("resnet_tiny_teacher", (32, 64, 128), 2, 695328),
}


def get_architecture(name: str) -> ArchitectureSpec:
    if name not in ARCHITECTURES:
        raise BackboneContractError(f"Unknown architecture '{name}' (known: {sorted(ARCHITECTURES)})")
    return ARCHITECTURES[name]


@dataclass
class StagedForwardOutput:
    pyramid: FeaturePyramid
    logits: torch.Tensor


class BasicBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class StagedResNet(nn.Module):
    """Three-stage residual classifier; stage outputs form the pyramid"""

    def __init__(self, architecture: str, num_classes: int, input_size: int = 32):
        super().__init__()
        self.spec = get_architecture(architecture)
        self.architecture = architecture
        self.num_classes = num_classes
        self.input_size = input_size
        self.frozen = False

        widths = self.spec.widths
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        in_channels = widths[0]
        for index, width in enumerate(widths):
            stride = 1 if index == 0 else 2
            blocks = [BasicBlock(in_channels, width, stride)]
            blocks += [BasicBlock(width, width) for _ in range(self.spec.blocks_per_stage - 1)]
            stages.append(nn.Sequential(*blocks))
            in_channels = width
        self.stages = nn.ModuleList(stages)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(widths[-1], num_classes)

        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(module, nn.BatchNorm2d):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    @property
    def stage_channels(self) -> List[int]:
        return list(self.spec.widths)

    def _check_input(self, batch: torch.Tensor) -> None:
        expected = (3, self.input_size, self.input_size)
        if batch.dim() != 4 or tuple(batch.shape[1:]) != expected:
            raise BackboneContractError(
                f"{self.architecture} expects input (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {tuple(batch.shape)}"
            )

    def forward_staged(self, batch: torch.Tensor) -> StagedForwardOutput:
        self._check_input(batch)
        x = self.stem(batch)
        stages = []
        for stage in self.stages:
            x = stage(x)
            stages.append(x)
        logits = self.fc(torch.flatten(self.pool(x), 1))
        return StagedForwardOutput(pyramid=FeaturePyramid(stages), logits=logits)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.forward_staged(batch).logits

    def train(self, mode: bool = True) -> "StagedResNet":
        # a frozen network keeps its inference statistics
        return super().train(mode and not self.frozen)


def forward_staged(net: StagedResNet, batch: torch.Tensor) -> StagedForwardOutput:
    return net.forward_staged(batch)


def freeze(net: StagedResNet) -> StagedResNet:
    net.requires_grad_(False)
    net.frozen = True
    net.eval()
    return net


def parameter_checksum(net: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order"""
    digest = hashlib.sha256()
    for name, tensor in sorted(net.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


@dataclass(frozen=True)
class CheckpointHeader:
    architecture: str
    class_count: int
    config_hash: str
    input_size: int = 32
    schema_version: int = CHECKPOINT_SCHEMA_VERSION

    def to_metadata(self) -> Dict[str, str]:
        return {
            "schema_version": str(self.schema_version),
            "architecture": self.architecture,
            "class_count": str(self.class_count),
            "config_hash": self.config_hash,
            "input_size": str(self.input_size),
        }

    @classmethod
    def from_metadata(cls, metadata: Optional[Dict[str, str]]) -> "CheckpointHeader":
        if not metadata:
            raise CheckpointError("checkpoint has no metadata header")
        try:
            header = cls(
                architecture=metadata["architecture"],
                class_count=int(metadata["class_count"]),
                config_hash=metadata["config_hash"],
                input_size=int(metadata.get("input_size", 32)),
                schema_version=int(metadata["schema_version"]),
            )
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint header: {exc}") from exc
        if header.schema_version != CHECKPOINT_SCHEMA_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint schema {header.schema_version} (expected {CHECKPOINT_SCHEMA_VERSION})"
            )
        return header


def save_checkpoint(path: Union[str, Path], header: CheckpointHeader, modules: Dict[str, nn.Module]) -> Path:
    """Write the state of each module under its key prefix, e.g. {"backbone.": net}"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: Dict[str, torch.Tensor] = {}
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            tensors[f"{prefix}{name}"] = tensor.detach().cpu().contiguous().clone()
    save_file(tensors, str(path), metadata=header.to_metadata())
    logger.info("checkpoint_saved", path=str(path), tensors=len(tensors), architecture=header.architecture)
    return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[CheckpointHeader, Dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="pt") as handle:
        header = CheckpointHeader.from_metadata(handle.metadata())
    return header, load_file(str(path))


def extract_prefix(tensors: Dict[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    return {name[len(prefix):]: tensor for name, tensor in tensors.items() if name.startswith(prefix)}


def load_backbone(
    path: Union[str, Path],
    expected_architecture: Optional[str] = None,
    expected_classes: Optional[int] = None,
    dtype: torch.dtype = torch.float64,
    device: Union[str, torch.device] = "cpu",
) -> Tuple[StagedResNet, CheckpointHeader]:
    header, tensors = read_checkpoint(path)
    if expected_architecture is not None and header.architecture != expected_architecture:
        raise CheckpointMismatchError(
            f"checkpoint architecture '{header.architecture}' != expected '{expected_architecture}'"
        )
    if expected_classes is not None and header.class_count != expected_classes:
        raise CheckpointMismatchError(
            f"checkpoint has {header.class_count} classes, dataset has {expected_classes}"
        )
    net = StagedResNet(header.architecture, header.class_count, header.input_size)
    net.to(device=device, dtype=dtype)
    try:
        net.load_state_dict(extract_prefix(tensors, BACKBONE_PREFIX))
    except RuntimeError as exc:
        raise CheckpointMismatchError(f"checkpoint tensors do not fit {header.architecture}: {exc}") from exc
    logger.info("backbone_loaded", path=str(path), architecture=header.architecture, classes=header.class_count)
    return net, header


def trainable_parameters(modules: Iterable[nn.Module]) -> List[nn.Parameter]:
    """Parameters with requires_grad, deduplicated by identity"""
    seen = set()
    params = []
    for module in modules:
        for param in module.parameters():
            if param.requires_grad and id(param) not in seen:
                seen.add(id(param))
                params.append(param)
    return params
