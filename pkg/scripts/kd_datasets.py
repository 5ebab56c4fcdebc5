#!/usr/bin/env python3
"""
Dataset Provisioning
Deterministic synthetic Gaussian-blob classification data, the CIFAR
binary record format, and a seeded batch loader whose order and
augmentation draws depend only on (seed, epoch).
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch.utils.data import DataLoader, Dataset

from kd_logging import get_logger

logger = get_logger(__name__)

CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE
# (label bytes, index of the label byte used)
CIFAR_LAYOUTS = {
    "cifar100": (2, 1),
    "cifar10": (1, 0),
}
CROP_PADDING = 4
BLOBS_PER_CLASS = 3


class DatasetFormatError(ValueError):
    """On-disk dataset does not follow the expected record layout"""

    def __init__(
        self,
        message: str,
        expected_bytes: Optional[int] = None,
        actual_bytes: Optional[int] = None,
        record_index: Optional[int] = None,
    ):
        super().__init__(message)
        self.expected_bytes = expected_bytes
        self.actual_bytes = actual_bytes
        self.record_index = record_index


class DatasetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["synthetic", "cifar-binary"] = "synthetic"
    class_count: int = Field(default=4, ge=2)
    input_size: int = Field(default=32, ge=4)
    train_size: int = Field(default=4000, ge=1)
    val_size: int = Field(default=1000, ge=1)
    seed: int = Field(default=0, ge=0)
    noise_scale: float = Field(default=0.25, ge=0.0)
    normalization_mean: Optional[List[float]] = None
    normalization_std: Optional[List[float]] = None
    cifar_variant: Literal["cifar100", "cifar10"] = "cifar100"
    train_path: Optional[str] = None
    val_path: Optional[str] = None
    augment: Optional[bool] = None

    @model_validator(mode="after")
    def _check_consistency(self) -> "DatasetSpec":
        for name in ("normalization_mean", "normalization_std"):
            value = getattr(self, name)
            if value is not None and len(value) != 3:
                raise ValueError(f"{name} needs one value per channel (3), got {len(value)}")
        if self.normalization_std is not None and min(self.normalization_std) <= 0:
            raise ValueError("normalization_std entries must be positive")
        if self.kind == "cifar-binary" and self.input_size != CIFAR_SIDE:
            raise ValueError(f"cifar-binary data is {CIFAR_SIDE}x{CIFAR_SIDE}, got input_size {self.input_size}")
        return self

    @property
    def augmentation_enabled(self) -> bool:
        if self.augment is not None:
            return self.augment
        return self.kind == "cifar-binary"


@dataclass
class LabeledBatch:
    images: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.images.dim() != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"images {tuple(self.images.shape)} and labels {tuple(self.labels.shape)} are inconsistent"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])


class ArrayDataset(Dataset):
    """Images in [0, 1] (N, 3, H, W) float64 with integer labels"""

    def __init__(self, images: np.ndarray, labels: np.ndarray, class_count: int):
        self.images = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float64))
        self.labels = torch.from_numpy(np.ascontiguousarray(labels, dtype=np.int64))
        self.class_count = class_count
        self.mean: Optional[torch.Tensor] = None
        self.std: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.images[index], self.labels[index]

    def set_normalization(self, mean: Sequence[float], std: Sequence[float]) -> None:
        self.mean = torch.tensor(mean, dtype=torch.float64).view(1, 3, 1, 1)
        self.std = torch.tensor(std, dtype=torch.float64).view(1, 3, 1, 1)

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        if self.mean is None:
            return images
        return (images - self.mean.to(images)) / self.std.to(images)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels.numpy(), minlength=self.class_count)


@dataclass
class DatasetSplits:
    train: ArrayDataset
    val: ArrayDataset


def channel_statistics(dataset: ArrayDataset) -> Tuple[List[float], List[float]]:
    """Per-channel mean and std over a whole split"""
    if len(dataset) == 0:
        return [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]
    images = dataset.images
    mean = images.mean(dim=(0, 2, 3))
    std = images.std(dim=(0, 2, 3)).clamp_min(1e-12)
    return mean.tolist(), std.tolist()


def _class_templates(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.input_size
    coords = np.arange(size, dtype=np.float64)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    templates = np.zeros((spec.class_count, 3, size, size))
    for label in range(spec.class_count):
        for _ in range(BLOBS_PER_CLASS):
            cy, cx = rng.uniform(0, size, size=2)
            width = rng.uniform(size / 10, size / 4)
            amplitude = rng.uniform(0.2, 1.0, size=3)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            templates[label] += amplitude[:, None, None] * blob
        templates[label] /= templates[label].max()
    return templates


def _synth_split(templates: np.ndarray, count: int, noise_scale: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    class_count = templates.shape[0]
    labels = np.arange(count) % class_count
    noise = noise_scale * rng.standard_normal((count,) + templates.shape[1:])
    images = np.clip(templates[labels] + noise, 0.0, 1.0)
    return images, labels


def synth_generate(spec: DatasetSpec) -> DatasetSplits:
    """Class-conditioned blob templates plus Gaussian noise, round-robin labels"""
    if spec.kind != "synthetic":
        raise ValueError(f"synth_generate needs kind 'synthetic', got '{spec.kind}'")
    templates = _class_templates(spec, np.random.default_rng([spec.seed, 0]))
    train_images, train_labels = _synth_split(
        templates, spec.train_size, spec.noise_scale, np.random.default_rng([spec.seed, 1])
    )
    val_images, val_labels = _synth_split(
        templates, spec.val_size, spec.noise_scale, np.random.default_rng([spec.seed, 2])
    )
    splits = DatasetSplits(
        train=ArrayDataset(train_images, train_labels, spec.class_count),
        val=ArrayDataset(val_images, val_labels, spec.class_count),
    )
    logger.info("synthetic_dataset_generated", classes=spec.class_count, train=spec.train_size, val=spec.val_size)
    return splits


def cifar_record_size(variant: str) -> int:
    label_bytes, _ = CIFAR_LAYOUTS[variant]
    return label_bytes + CIFAR_PIXELS


def cifar_load(path: Union[str, Path], spec: DatasetSpec) -> ArrayDataset:
    """Parse a CIFAR binary batch file (label byte(s) + 3072 pixel bytes per record)"""
    path = Path(path)
    if not path.is_file():
        raise DatasetFormatError(f"CIFAR file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    label_bytes, label_index = CIFAR_LAYOUTS[spec.cifar_variant]
    record_size = label_bytes + CIFAR_PIXELS
    if raw.size % record_size:
        expected = (raw.size // record_size + 1) * record_size
        raise DatasetFormatError(
            f"{path}: length {raw.size} is not a multiple of the {record_size}-byte record size "
            f"(expected {expected} bytes for the next whole record)",
            expected_bytes=expected,
            actual_bytes=int(raw.size),
        )
    records = raw.reshape(-1, record_size)
    labels = records[:, label_index].astype(np.int64)
    bad = np.flatnonzero(labels >= spec.class_count)
    if bad.size:
        index = int(bad[0])
        raise DatasetFormatError(
            f"{path}: record {index} has label {labels[index]} >= class count {spec.class_count}",
            record_index=index,
        )
    images = records[:, label_bytes:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0
    logger.info("cifar_loaded", path=str(path), records=len(labels), variant=spec.cifar_variant)
    return ArrayDataset(images, labels, spec.class_count)


def write_cifar_binary(
    path: Union[str, Path],
    pixels: np.ndarray,
    fine_labels: Sequence[int],
    coarse_labels: Optional[Sequence[int]] = None,
    variant: str = "cifar100",
) -> Path:
    """Inverse of cifar_load for uint8 pixels shaped (N, 3, 32, 32)"""
    path = Path(path)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(fine_labels), CIFAR_PIXELS)
    label_bytes, _ = CIFAR_LAYOUTS[variant]
    header = np.zeros((len(fine_labels), label_bytes), dtype=np.uint8)
    if variant == "cifar100":
        header[:, 0] = coarse_labels if coarse_labels is not None else 0
        header[:, 1] = fine_labels
    else:
        header[:, 0] = fine_labels
    path.parent.mkdir(parents=True, exist_ok=True)
    np.concatenate([header, pixels], axis=1).tofile(path)
    return path


def build_datasets(spec: DatasetSpec) -> DatasetSplits:
    """Materialise both splits and attach normalization constants"""
    if spec.kind == "synthetic":
        splits = synth_generate(spec)
    else:
        if not spec.train_path or not spec.val_path:
            raise DatasetFormatError("cifar-binary datasets need dataset.train_path and dataset.val_path")
        splits = DatasetSplits(train=cifar_load(spec.train_path, spec), val=cifar_load(spec.val_path, spec))

    if spec.normalization_mean is not None and spec.normalization_std is not None:
        mean, std = spec.normalization_mean, spec.normalization_std
    else:
        mean, std = channel_statistics(splits.train)
    splits.train.set_normalization(mean, std)
    splits.val.set_normalization(mean, std)
    return splits


class _FixedOrderSampler:
    """Yields precomputed index batches; the only ordering authority"""

    def __init__(self, batches: List[List[int]]):
        self.batches = batches

    def __iter__(self):
        return iter(self.batches)

    def __len__(self) -> int:
        return len(self.batches)


def _stack(items):
    images = torch.stack([item[0] for item in items])
    labels = torch.stack([item[1] for item in items])
    return images, labels


class EpochLoader:
    """Seeded batch iterator.

    Index order and augmentation parameters are drawn up front, in this
    thread, from default_rng([seed, epoch]); worker processes only gather
    rows, so prefetching never changes the delivered stream.
    """

    def __init__(
        self,
        dataset: ArrayDataset,
        batch_size: int,
        seed: int,
        shuffle: bool,
        augment: bool = False,
        num_workers: int = 0,
        dtype: torch.dtype = torch.float64,
    ):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.augment = augment
        self.num_workers = num_workers
        self.dtype = dtype
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return (len(self.dataset) + self.batch_size - 1) // self.batch_size

    def _plan(self) -> Tuple[List[List[int]], np.random.Generator]:
        rng = np.random.default_rng([self.seed, self.epoch])
        n = len(self.dataset)
        order = rng.permutation(n) if self.shuffle else np.arange(n)
        batches = [order[start:start + self.batch_size].tolist() for start in range(0, n, self.batch_size)]
        return batches, rng

    def _augment(self, images: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        count, _, height, width = images.shape
        offsets = rng.integers(0, 2 * CROP_PADDING + 1, size=(count, 2))
        flips = rng.random(count) < 0.5
        padded = F.pad(images, (CROP_PADDING,) * 4)
        out = torch.empty_like(images)
        for i in range(count):
            dy, dx = int(offsets[i, 0]), int(offsets[i, 1])
            crop = padded[i, :, dy:dy + height, dx:dx + width]
            out[i] = torch.flip(crop, dims=(2,)) if flips[i] else crop
        return out

    def __iter__(self) -> Iterator[LabeledBatch]:
        batches, rng = self._plan()
        if not batches:
            return
        loader = DataLoader(
            self.dataset,
            batch_sampler=_FixedOrderSampler(batches),
            num_workers=self.num_workers,
            collate_fn=_stack,
        )
        for images, labels in loader:
            if self.augment:
                images = self._augment(images, rng)
            images = self.dataset.normalize(images).to(self.dtype)
            yield LabeledBatch(images=images, labels=labels)


def make_loader(
    handle: ArrayDataset,
    batch_size: int,
    seed: int,
    shuffle: bool,
    augment: bool = False,
    num_workers: int = 0,
    dtype: torch.dtype = torch.float64,
) -> EpochLoader:
    return EpochLoader(handle, batch_size, seed, shuffle, augment=augment, num_workers=num_workers, dtype=dtype)
