"""Shared fixtures; makes the flat scripts/ modules importable."""

import sys
from pathlib import Path

import pytest

SCRIPTS_DIR = Path(__file__).resolve().parent.parent / "scripts"
sys.path.insert(0, str(SCRIPTS_DIR))

from experiment_config import ExperimentConfig, config_from_mapping  # noqa: E402
from kd_logging import configure_logging  # noqa: E402

configure_logging(level="WARNING")


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run long experiments and oracle sweeps")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment, needs --run-slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def micro_mapping(out_dir: Path) -> dict:
    """Small synthetic run: micro nets, 2 classes, 16px inputs"""
    return {
        "dataset": {
            "kind": "synthetic",
            "class_count": 2,
            "input_size": 16,
            "train_size": 32,
            "val_size": 16,
            "seed": 3,
        },
        "teacher": {"architecture": "resnet_micro", "checkpoint": None},
        "student": {"architecture": "resnet_micro"},
        "batch_size": 8,
        "epochs": 1,
        "seed": 7,
        "device": "cpu",
        "dtype": "float64",
        "mode": "ce_only",
        "out_dir": str(out_dir),
        "progress": False,
    }


@pytest.fixture
def micro_config_data(tmp_path):
    return micro_mapping(tmp_path / "run")


@pytest.fixture
def micro_config(micro_config_data) -> ExperimentConfig:
    return config_from_mapping(micro_config_data)


@pytest.fixture(scope="session")
def micro_teacher_checkpoint(tmp_path_factory) -> str:
    """Best checkpoint of a short cross-entropy run of the micro teacher"""
    from distill_trainer import pretrain_teacher

    out_dir = tmp_path_factory.mktemp("teacher")
    cfg = config_from_mapping(micro_mapping(out_dir), {"epochs": 2})
    return pretrain_teacher(cfg).checkpoint_path


@pytest.fixture
def distill_config(micro_config_data, micro_teacher_checkpoint) -> ExperimentConfig:
    """micro_config pointed at the pretrained micro teacher, unikd mode"""
    return config_from_mapping(micro_config_data, {"mode": "unikd", "teacher.checkpoint": micro_teacher_checkpoint})
