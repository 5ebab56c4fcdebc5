#!/usr/bin/env python3
"""
Device Detection and Reproducibility Setup
Picks the training device for a requested precision, seeds every RNG and
snapshots the host resources at run start.
"""

import os
import random
import sys
from dataclasses import asdict, dataclass
from typing import Any, Dict

import numpy as np
import psutil
import torch

from kd_logging import get_logger

logger = get_logger(__name__)

DTYPES = {
    "float64": torch.float64,
    "float32": torch.float32,
}


class DeviceSelectionError(ValueError):
    """Requested device cannot run the requested precision"""


@dataclass
class SystemInfo:
    """System information and capabilities"""
    platform: str
    cpu_cores: int
    total_memory_gb: float
    available_memory_gb: float
    cuda_available: bool
    mps_available: bool
    torch_version: str


def get_system_info() -> SystemInfo:
    memory = psutil.virtual_memory()
    return SystemInfo(
        platform=sys.platform,
        cpu_cores=psutil.cpu_count() or 1,
        total_memory_gb=memory.total / (1024**3),
        available_memory_gb=memory.available / (1024**3),
        cuda_available=torch.cuda.is_available(),
        mps_available=_mps_available(),
        torch_version=torch.__version__,
    )


def _mps_available() -> bool:
    return hasattr(torch.backends, "mps") and torch.backends.mps.is_available()


def resolve_dtype(name: str) -> torch.dtype:
    if name not in DTYPES:
        raise DeviceSelectionError(f"Unsupported dtype '{name}' (expected one of {sorted(DTYPES)})")
    return DTYPES[name]


def select_device(hint: str = "auto", dtype: str = "float64") -> torch.device:
    """Resolve a device hint into a concrete torch.device.

    Priority for "auto" is CUDA, then MPS (float32 only, MPS has no
    double support), then CPU.
    """
    hint = hint.lower()
    if hint == "auto":
        if torch.cuda.is_available():
            device = torch.device("cuda")
        elif dtype == "float32" and _mps_available():
            device = torch.device("mps")
        else:
            device = torch.device("cpu")
        logger.info("device_selected", hint=hint, device=str(device), dtype=dtype)
        return device

    if hint.startswith("cuda"):
        if not torch.cuda.is_available():
            raise DeviceSelectionError(f"Device '{hint}' requested but CUDA is not available")
    elif hint == "mps":
        if not _mps_available():
            raise DeviceSelectionError("Device 'mps' requested but MPS is not available")
        if dtype == "float64":
            raise DeviceSelectionError("MPS does not support float64; use dtype float32 or device cpu")
    elif hint != "cpu":
        raise DeviceSelectionError(f"Unknown device hint '{hint}'")

    device = torch.device(hint)
    logger.info("device_selected", hint=hint, device=str(device), dtype=dtype)
    return device


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch and force deterministic kernels"""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if torch.cuda.is_available():
        torch.cuda.manual_seed_all(seed)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True
    torch.use_deterministic_algorithms(True, warn_only=True)


def describe_environment() -> Dict[str, Any]:
    info = asdict(get_system_info())
    logger.info("system_info", **info)
    return info
