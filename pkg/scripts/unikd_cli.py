#!/usr/bin/env python3
"""
UniKD Command Line
Verbs: train, pretrain-teacher, eval, diagnose, kl-check, compare.

Exit codes: 0 success, 1 validation failure, 2 configuration error.
"""

import functools
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import click
from rich.table import Table

from device_detection import DeviceSelectionError, resolve_dtype, select_device
from distill_trainer import (
    MissingTeacherError,
    NonFiniteLossError,
    TeacherMutatedError,
    compare_modes,
    pretrain_teacher,
    run_experiment,
)
from distribution_head import DistributionHeadContractError
from experiment_config import MODES, ConfigError, ExperimentConfig, load_config
from feature_fusion import FusionContractError
from kd_datasets import DatasetFormatError, build_datasets, make_loader
from kd_diagnostics import DiagnosticsError, diagnose, evaluate_model, kl_selfcheck, resolve_model, write_cdf_csv, write_corr_csv
from kd_distributions import DistributionContractError
from kd_logging import configure_logging, console, log_error, log_info, log_step, log_success, log_warning
from kd_losses import LossContractError
from kd_plots import render_cdf, render_corr_diff, render_loss_curves
from staged_backbones import BackboneContractError, CheckpointError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2

CONFIG_ERRORS = (ConfigError, DeviceSelectionError)
VALIDATION_ERRORS = (
    CheckpointError,
    DatasetFormatError,
    DiagnosticsError,
    MissingTeacherError,
    TeacherMutatedError,
    NonFiniteLossError,
    BackboneContractError,
    FusionContractError,
    DistributionContractError,
    DistributionHeadContractError,
    LossContractError,
)

# flag name -> dotted config key
OVERRIDE_KEYS = {
    "seed": "seed",
    "mode": "mode",
    "alpha": "loss.alpha",
    "beta": "loss.beta",
    "tau": "loss.tau",
    "out_dir": "out_dir",
    "dataset": "dataset.kind",
    "epochs": "epochs",
}


def experiment_options(func: Callable) -> Callable:
    """--config plus the flags that override config file values"""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON experiment config"),
        click.option("--seed", type=int, default=None, help="Run seed"),
        click.option("--mode", type=click.Choice(MODES), default=None, help="Distillation mode"),
        click.option("--alpha", type=float, default=None, help="Feature loss weight"),
        click.option("--beta", type=float, default=None, help="Logits loss weight"),
        click.option("--tau", type=float, default=None, help="Softmax temperature"),
        click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Output directory"),
        click.option("--dataset", type=click.Choice(["synthetic", "cifar-binary"]), default=None, help="Dataset kind"),
        click.option("--epochs", type=int, default=None, help="Epoch budget"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def build_config(config_path: Optional[str], **flags: Any) -> ExperimentConfig:
    overrides: Dict[str, Any] = {
        OVERRIDE_KEYS[name]: value for name, value in flags.items() if name in OVERRIDE_KEYS and value is not None
    }
    return load_config(config_path, overrides)


def handle_errors(func: Callable) -> Callable:
    """Map the package's exception families onto exit codes"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            code = func(*args, **kwargs)
        except CONFIG_ERRORS as exc:
            log_error(f"Configuration error: {exc}")
            sys.exit(EXIT_CONFIG)
        except VALIDATION_ERRORS as exc:
            log_error(f"{type(exc).__name__}: {exc}")
            sys.exit(EXIT_VALIDATION)
        sys.exit(code or EXIT_OK)

    return wrapper


def _split_for(cfg: ExperimentConfig, split: str):
    splits = build_datasets(cfg.dataset)
    return splits.train if split == "train" else splits.val


@click.group()
@click.option("--log-level", default="WARNING", show_default=True, help="Structured log level")
@click.option("--json-logs", is_flag=True, help="Emit structured logs as JSON lines")
def cli(log_level: str, json_logs: bool) -> None:
    """UniKD: unified feature and logits knowledge distillation"""
    configure_logging(level=log_level, json_output=json_logs or None)


@cli.command()
@experiment_options
@handle_errors
def train(config_path, **flags) -> int:
    """Distil a student from the configured teacher"""
    cfg = build_config(config_path, **flags)
    log_step(f"Training {cfg.student.architecture} in mode {cfg.mode} (seed {cfg.seed})")
    report = run_experiment(cfg)

    table = Table(title=f"{cfg.mode} / seed {cfg.seed}")
    for column in ("epoch", "ce", "fl", "logits_kl", "total", "val_top1"):
        table.add_column(column, justify="right")
    for summary in report.epochs:
        loss = summary.train
        table.add_row(
            str(summary.epoch),
            f"{loss.ce:.4f}",
            f"{loss.fl:.4f}",
            f"{loss.logits_kl:.4f}",
            f"{loss.total:.4f}",
            f"{summary.val_top1:.2f}",
        )
    console().print(table)
    log_success(f"Best val top-1 {report.best_val_top1:.2f}% at epoch {report.best_epoch}")
    log_info(f"Checkpoint: {report.checkpoint_path}")
    return EXIT_OK


@cli.command("pretrain-teacher")
@experiment_options
@handle_errors
def pretrain_teacher_command(config_path, **flags) -> int:
    """Train the teacher architecture with cross-entropy only"""
    cfg = build_config(config_path, **flags)
    log_step(f"Pretraining teacher {cfg.teacher.architecture}")
    report = pretrain_teacher(cfg)
    log_success(f"Teacher val top-1 {report.best_val_top1:.2f}%")
    log_info(f"Set teacher.checkpoint to {report.checkpoint_path}")
    return EXIT_OK


@cli.command("eval")
@experiment_options
@click.option("--checkpoint", type=click.Path(dir_okay=False), required=True, help="Model checkpoint")
@click.option("--split", type=click.Choice(["val", "train"]), default="val", show_default=True)
@click.option("--batch-size", type=int, default=256, show_default=True)
@handle_errors
def eval_command(config_path, checkpoint, split, batch_size, **flags) -> int:
    """Top-1 / top-5 accuracy of a checkpoint"""
    cfg = build_config(config_path, **flags)
    dtype = resolve_dtype(cfg.dtype)
    device = select_device(cfg.device, cfg.dtype)
    data = _split_for(cfg, split)
    model = resolve_model(checkpoint, data, device, dtype)
    result = evaluate_model(model, make_loader(data, batch_size, cfg.seed, shuffle=False, dtype=dtype), device, dtype)
    log_success(f"{split}: top-1 {result.top1:.2f}%  top-5 {result.top5:.2f}%  ({result.count} samples)")
    return EXIT_OK


@cli.command("diagnose")
@experiment_options
@click.option("--student-checkpoint", type=click.Path(dir_okay=False), required=True)
@click.option("--teacher-checkpoint", type=click.Path(dir_okay=False), default=None, help="Defaults to teacher.checkpoint")
@click.option("--n-points", type=int, default=101, show_default=True)
@click.option("--metrics", type=click.Path(dir_okay=False), default=None, help="metrics.jsonl to plot loss curves from")
@click.option("--plots/--no-plots", default=True, show_default=True)
@handle_errors
def diagnose_command(config_path, student_checkpoint, teacher_checkpoint, n_points, metrics, plots, **flags) -> int:
    """Logits-gap CDF and correlation-matrix difference on the validation split"""
    cfg = build_config(config_path, **flags)
    teacher_checkpoint = teacher_checkpoint or cfg.teacher.checkpoint
    if teacher_checkpoint is None:
        raise ConfigError("diagnose needs --teacher-checkpoint or teacher.checkpoint")
    dtype = resolve_dtype(cfg.dtype)
    device = select_device(cfg.device, cfg.dtype)
    report = diagnose(teacher_checkpoint, student_checkpoint, _split_for(cfg, "val"), n_points, device=device, dtype=dtype)

    out_dir = Path(cfg.out_dir)
    write_cdf_csv(out_dir / "cdf.csv", report.cdf_points)
    write_corr_csv(out_dir / "corr_diff.csv", report.corr_diff)
    (out_dir / "diagnostics.json").write_text(json.dumps(report.summary(), indent=2) + "\n")
    if plots:
        render_cdf(report.cdf_points, out_dir / "cdf.png")
        render_corr_diff(report.corr_diff, out_dir / "corr_diff.png")
        if metrics:
            render_loss_curves(metrics, out_dir / "loss_curves.png")
    log_success(
        f"Student top-1 {report.top1:.2f}%, mean |logit gap| {report.mean_abs_logit_gap:.4f}, "
        f"max corr diff {float(report.corr_diff.max()):.4f}"
    )
    log_info(f"Diagnostics written to {out_dir}")
    return EXIT_OK


@cli.command("kl-check")
@experiment_options
@click.option("--cases", type=int, default=100, show_default=True)
@click.option("--samples", type=int, default=10**6, show_default=True)
@handle_errors
def kl_check_command(config_path, cases, samples, **flags) -> int:
    """Closed-form KL against the Monte-Carlo oracle"""
    cfg = build_config(config_path, **flags)
    log_step(f"Checking {cases} random cases with {samples} samples each (seed {cfg.seed})")
    summary = kl_selfcheck(cases, cfg.seed, n_samples=samples)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "kl_check.json").write_text(json.dumps(summary.as_dict(), indent=2) + "\n")

    table = Table(title="KL self-check")
    table.add_column("kind")
    table.add_column("max deviation", justify="right")
    for kind in ("diag", "full", "reduction"):
        table.add_row(kind, f"{summary.max_deviation(kind):.3e}")
    console().print(table)

    if not summary.passed:
        for case in summary.failures:
            log_warning(
                f"case {case.index} ({case.kind}, k={case.k}): deviation {case.deviation:.3e} > {case.tolerance:.3e}"
            )
        log_error(f"{len(summary.failures)} of {len(summary.cases)} cases failed")
        return EXIT_VALIDATION
    log_success(f"All {len(summary.cases)} cases passed")
    return EXIT_OK


@cli.command("compare")
@experiment_options
@click.option("--modes", default="unikd,hybrid_kd_mse,ce_only", show_default=True, help="Comma-separated modes")
@click.option("--seeds", default="0,1,2,3,4", show_default=True, help="Comma-separated seeds")
@handle_errors
def compare_command(config_path, modes, seeds, **flags) -> int:
    """Best val accuracy per mode over several seeds, next to the teacher"""
    cfg = build_config(config_path, **flags)
    mode_list = [mode.strip() for mode in modes.split(",") if mode.strip()]
    unknown = sorted(set(mode_list) - set(MODES))
    if unknown:
        raise ConfigError(f"unknown modes {unknown} (known: {list(MODES)})")
    try:
        seed_list = [int(seed) for seed in seeds.split(",") if seed.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers: {exc}") from exc
    if not mode_list or not seed_list:
        raise ConfigError("--modes and --seeds each need at least one entry")

    comparison = compare_modes(cfg, mode_list, seed_list)
    table = Table(title=f"best val top-1 over seeds {seed_list}")
    table.add_column("model")
    table.add_column("mean", justify="right")
    table.add_column("stdev", justify="right")
    if comparison.teacher_top1 is not None:
        table.add_row(f"teacher ({cfg.teacher.architecture})", f"{comparison.teacher_top1:.2f}", "-")
    for name, summary in comparison.modes.items():
        table.add_row(name, f"{summary.mean:.2f}", f"{summary.stdev:.2f}")
    console().print(table)
    return EXIT_OK


if __name__ == "__main__":
    cli()
