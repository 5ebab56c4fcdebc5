#!/usr/bin/env python3
"""
Distillation Trainer
Frozen teacher, trainable student plus both fusion stacks and the shared
distribution head, optimised jointly with

    total = ce + alpha * fl + beta * logits_kl

Which feature term `fl` is and which weights are live depends on the mode:

    ce_only        fl, logits_kl reported only          alpha = beta = 0
    kd_only        fl = 0                               alpha = 0
    mse_only       fl = stage-wise feature MSE          beta = 0
    hybrid_kd_mse  fl = stage-wise feature MSE
    unikd          fl = distribution KL over the fused pyramids
    fdp_only       fl = distribution KL over the last stages
"""

import contextlib
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import jsonlines
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim.lr_scheduler import MultiStepLR
from tqdm import tqdm

from device_detection import describe_environment, resolve_dtype, seed_everything, select_device
from distribution_head import FeatureDistributionHead, feature_distribution_loss
from experiment_config import ExperimentConfig, config_hash, save_config, with_overrides
from feature_fusion import AdaptiveFeatureFusion, build_fusion
from kd_datasets import DatasetFormatError, LabeledBatch, build_datasets, make_loader
from kd_diagnostics import AccuracyResult, eval_top1, evaluate_model
from kd_distributions import NonFiniteParameterError
from kd_logging import get_logger
from kd_losses import (
    FeatureRegressor,
    LogitsBundle,
    LossBreakdown,
    LossWeights,
    NonFiniteLogitsError,
    build_feature_regressors,
    feature_mse_loss,
    logits_kd_loss,
    total_loss,
    weighted_objective,
)
from staged_backbones import (
    CheckpointHeader,
    CheckpointMismatchError,
    StagedForwardOutput,
    StagedResNet,
    freeze,
    load_backbone,
    parameter_checksum,
    save_checkpoint,
    trainable_parameters,
)

logger = get_logger(__name__)

FUSION_MODES = ("unikd", "ce_only")
MSE_MODES = ("mse_only", "hybrid_kd_mse")
METRICS_FILE = "metrics.jsonl"
REPORT_FILE = "report.json"
BEST_CHECKPOINT = "best_student.safetensors"


class MissingTeacherError(RuntimeError):
    """Mode needs a teacher but no usable checkpoint was configured"""


class TeacherMutatedError(RuntimeError):
    """Teacher parameters changed during distillation"""


class NonFiniteLossError(RuntimeError):
    """A loss component became NaN or infinite"""

    def __init__(self, component: str, step: int):
        super().__init__(f"non-finite {component} at step {step}")
        self.component = component
        self.step = step


def effective_weights(cfg: ExperimentConfig) -> LossWeights:
    alpha, beta = cfg.loss.alpha, cfg.loss.beta
    if cfg.mode == "ce_only":
        alpha, beta = 0.0, 0.0
    elif cfg.mode == "kd_only":
        alpha = 0.0
    elif cfg.mode == "mse_only":
        beta = 0.0
    return LossWeights(alpha=alpha, beta=beta)


@dataclass
class TrainingState:
    """Everything the training loop mutates"""
    student: StagedResNet
    optimizer: torch.optim.Optimizer
    scheduler: MultiStepLR
    weights: LossWeights
    device: torch.device
    dtype: torch.dtype
    teacher: Optional[StagedResNet] = None
    student_fusion: Optional[AdaptiveFeatureFusion] = None
    teacher_fusion: Optional[AdaptiveFeatureFusion] = None
    head: Optional[FeatureDistributionHead] = None
    regressors: Optional[nn.ModuleList] = None
    adapter: Optional[FeatureRegressor] = None
    step: int = 0

    def student_side(self) -> Dict[str, nn.Module]:
        """Trainable modules keyed by their checkpoint prefix"""
        modules = {
            "backbone.": self.student,
            "aff.student.": self.student_fusion,
            "aff.teacher.": self.teacher_fusion,
            "fdp.": self.head,
            "regressor.": self.regressors,
            "adapter.": self.adapter,
        }
        return {prefix: module for prefix, module in modules.items() if module is not None}

    def train(self) -> None:
        for module in self.student_side().values():
            module.train()

    def eval(self) -> None:
        for module in self.student_side().values():
            module.eval()

    def learning_rate(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])


def build_training_state(
    cfg: ExperimentConfig,
    teacher: Optional[StagedResNet],
    device: torch.device = torch.device("cpu"),
    dtype: torch.dtype = torch.float64,
) -> TrainingState:
    """Student, mode-specific auxiliary modules and the optimizer.

    The two fusion stacks share one distribution head object, so both
    paths train the same parameters.
    """
    if teacher is None and cfg.needs_teacher:
        raise MissingTeacherError(f"mode '{cfg.mode}' needs a teacher")
    num_classes = cfg.dataset.class_count

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        student = StagedResNet(cfg.student.architecture, num_classes, cfg.dataset.input_size)
    student.to(device=device, dtype=dtype)
    if cfg.student.init_from_teacher:
        if teacher is None:
            raise MissingTeacherError("student.init_from_teacher needs a teacher checkpoint")
        student.load_state_dict(teacher.state_dict())

    student_fusion = teacher_fusion = head = regressors = adapter = None
    optimised: List[nn.Module] = [student]
    if teacher is not None:
        target = teacher.stage_channels[-1]
        if cfg.mode in FUSION_MODES:
            teacher_fusion = build_fusion(teacher.stage_channels, target, cfg.seed)
            student_fusion = build_fusion(student.stage_channels, target, cfg.seed)
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(cfg.seed)
                head = FeatureDistributionHead(target, num_classes)
            if cfg.mode == "unikd":
                optimised += [student_fusion, teacher_fusion, head]
        elif cfg.mode == "fdp_only":
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(cfg.seed)
                adapter = FeatureRegressor(student.stage_channels[-1], target)
                head = FeatureDistributionHead(target, num_classes)
            optimised += [adapter, head]
        elif cfg.mode in MSE_MODES:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(cfg.seed)
                regressors = build_feature_regressors(student.stage_channels, teacher.stage_channels)
            optimised.append(regressors)

    for module in (student, student_fusion, teacher_fusion, head, regressors, adapter):
        if module is not None:
            module.to(device=device, dtype=dtype)

    params = trainable_parameters(optimised)
    optimizer = torch.optim.SGD(
        params,
        lr=cfg.optimizer.learning_rate,
        momentum=cfg.optimizer.momentum,
        weight_decay=cfg.optimizer.weight_decay,
    )
    scheduler = MultiStepLR(optimizer, milestones=cfg.optimizer.milestone_epochs(cfg.epochs), gamma=cfg.optimizer.gamma)
    logger.info(
        "training_state_built",
        mode=cfg.mode,
        student=cfg.student.architecture,
        teacher=teacher.architecture if teacher is not None else None,
        optimised_parameters=sum(p.numel() for p in params),
    )
    return TrainingState(
        student=student,
        optimizer=optimizer,
        scheduler=scheduler,
        weights=effective_weights(cfg),
        device=torch.device(device),
        dtype=dtype,
        teacher=teacher,
        student_fusion=student_fusion,
        teacher_fusion=teacher_fusion,
        head=head,
        regressors=regressors,
        adapter=adapter,
    )


def _feature_term(
    state: TrainingState,
    cfg: ExperimentConfig,
    teacher_out: StagedForwardOutput,
    student_out: StagedForwardOutput,
) -> torch.Tensor:
    if cfg.mode in FUSION_MODES:
        teacher_fused = state.teacher_fusion(teacher_out.pyramid)
        student_fused = state.student_fusion(student_out.pyramid)
        return feature_distribution_loss(
            student_fused, teacher_fused, state.head, detach_teacher=cfg.detach_teacher_distribution
        )
    if cfg.mode == "fdp_only":
        return feature_distribution_loss(
            state.adapter(student_out.pyramid.stages[-1]),
            teacher_out.pyramid.stages[-1],
            state.head,
            detach_teacher=cfg.detach_teacher_distribution,
        )
    if cfg.mode in MSE_MODES:
        return feature_mse_loss(teacher_out.pyramid.stages, student_out.pyramid.stages, state.regressors)
    return student_out.logits.new_zeros(())


def _require_finite(component: str, value: torch.Tensor, step: int) -> None:
    if not bool(torch.isfinite(value).all()):
        logger.error("non_finite_loss", component=component, step=step)
        raise NonFiniteLossError(component, step)


@contextlib.contextmanager
def _named_component(component: str, step: int) -> Iterator[None]:
    """Report NaN or infinity met inside a loss term as that term's failure"""
    try:
        yield
    except (NonFiniteParameterError, NonFiniteLogitsError) as exc:
        logger.error("non_finite_loss", component=component, step=step, cause=str(exc))
        raise NonFiniteLossError(component, step) from exc


def train_step(batch: LabeledBatch, state: TrainingState, cfg: ExperimentConfig) -> LossBreakdown:
    """One optimizer update; returns the loss breakdown computed before it.

    Modules are used in whatever train/eval mode they are in.
    """
    images = batch.images.to(device=state.device, dtype=state.dtype)
    labels = batch.labels.to(state.device)

    student_out = state.student.forward_staged(images)
    ce = F.cross_entropy(student_out.logits, labels)
    _require_finite("ce", ce, state.step)

    zero = ce.new_zeros(())
    fl, lk = zero, zero
    if state.teacher is not None:
        with torch.no_grad():
            teacher_out = state.teacher.forward_staged(images)
        reporting_only = cfg.mode == "ce_only"
        with torch.no_grad() if reporting_only else contextlib.nullcontext():
            with _named_component("fl", state.step):
                fl = _feature_term(state, cfg, teacher_out, student_out)
            _require_finite("fl", fl, state.step)
            if cfg.mode != "mse_only":
                with _named_component("logits_kl", state.step):
                    lk = logits_kd_loss(LogitsBundle(teacher_out.logits, student_out.logits, cfg.loss.tau))
                _require_finite("logits_kl", lk, state.step)

    breakdown = total_loss(ce, fl, lk, state.weights)
    objective = weighted_objective(ce, fl, lk, state.weights)
    state.optimizer.zero_grad(set_to_none=True)
    objective.backward()
    state.optimizer.step()
    state.step += 1
    return breakdown


def mean_breakdown(breakdowns: Sequence[LossBreakdown]) -> LossBreakdown:
    count = len(breakdowns)
    ce = sum(b.ce for b in breakdowns) / count
    fl = sum(b.fl for b in breakdowns) / count
    lk = sum(b.logits_kl for b in breakdowns) / count
    weights = LossWeights(alpha=breakdowns[0].alpha, beta=breakdowns[0].beta)
    return total_loss(ce, fl, lk, weights)


@dataclass
class EpochSummary:
    epoch: int
    train: LossBreakdown
    val_top1: float
    val_top5: float
    learning_rate: float


@dataclass
class TrainReport:
    mode: str
    seed: int
    epochs: List[EpochSummary]
    best_val_top1: float
    best_epoch: int
    checkpoint_path: str
    metrics_path: str
    wall_clock_seconds: float
    teacher_checksum: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path: Path) -> Path:
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def load_teacher(cfg: ExperimentConfig, device: torch.device, dtype: torch.dtype) -> Optional[StagedResNet]:
    """Frozen teacher from cfg.teacher.checkpoint; None when ce_only has no checkpoint"""
    checkpoint = cfg.teacher.checkpoint
    if checkpoint is None or not Path(checkpoint).is_file():
        if cfg.needs_teacher:
            raise MissingTeacherError(
                f"mode '{cfg.mode}' needs a teacher checkpoint, got {checkpoint!r}; "
                "run `pretrain-teacher` first or set teacher.checkpoint"
            )
        return None
    teacher, header = load_backbone(
        checkpoint,
        expected_architecture=cfg.teacher.architecture,
        expected_classes=cfg.dataset.class_count,
        dtype=dtype,
        device=device,
    )
    if header.input_size != cfg.dataset.input_size:
        raise CheckpointMismatchError(
            f"teacher was trained on {header.input_size}px inputs, dataset has {cfg.dataset.input_size}px"
        )
    freeze(teacher)
    logger.info("teacher_loaded", checkpoint=checkpoint, architecture=header.architecture)
    return teacher


def run_experiment(cfg: ExperimentConfig) -> TrainReport:
    """Full training run with per-epoch validation and best-student checkpointing"""
    started = time.perf_counter()
    seed_everything(cfg.seed)
    dtype = resolve_dtype(cfg.dtype)
    device = select_device(cfg.device, cfg.dtype)
    describe_environment()

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.json")

    splits = build_datasets(cfg.dataset)
    if len(splits.train) == 0:
        raise DatasetFormatError(f"training split is empty ({cfg.dataset.train_path or cfg.dataset.kind})")
    train_loader = make_loader(
        splits.train,
        cfg.batch_size,
        cfg.seed,
        shuffle=True,
        augment=cfg.dataset.augmentation_enabled,
        num_workers=cfg.num_workers,
        dtype=dtype,
    )
    val_loader = make_loader(splits.val, cfg.batch_size, cfg.seed, shuffle=False, num_workers=cfg.num_workers, dtype=dtype)

    teacher = load_teacher(cfg, device, dtype)
    teacher_checksum = parameter_checksum(teacher) if teacher is not None else None
    state = build_training_state(cfg, teacher, device, dtype)
    header = CheckpointHeader(
        architecture=cfg.student.architecture,
        class_count=cfg.dataset.class_count,
        config_hash=config_hash(cfg),
        input_size=cfg.dataset.input_size,
    )

    checkpoint_path = out_dir / BEST_CHECKPOINT
    metrics_path = out_dir / METRICS_FILE
    summaries: List[EpochSummary] = []
    best_top1, best_epoch = -1.0, -1

    with jsonlines.open(metrics_path, mode="w") as writer:
        for epoch in range(cfg.epochs):
            train_loader.set_epoch(epoch)
            state.train()
            learning_rate = state.learning_rate()
            breakdowns: List[LossBreakdown] = []
            progress = tqdm(
                train_loader,
                desc=f"{cfg.mode} epoch {epoch + 1}/{cfg.epochs}",
                disable=not cfg.progress,
                leave=False,
            )
            for batch in progress:
                step = state.step
                breakdown = train_step(batch, state, cfg)
                breakdowns.append(breakdown)
                if step % cfg.log_every == 0:
                    writer.write({"step": step, "epoch": epoch, **breakdown.as_record()})
                progress.set_postfix(total=f"{breakdown.total:.4f}")
            state.scheduler.step()

            state.eval()
            accuracy: AccuracyResult = evaluate_model(state.student, val_loader, device, dtype)
            epoch_loss = mean_breakdown(breakdowns)
            writer.write(
                {
                    "step": state.step,
                    "epoch": epoch,
                    **epoch_loss.as_record(),
                    "val_top1": accuracy.top1,
                    "val_top5": accuracy.top5,
                }
            )
            summaries.append(EpochSummary(epoch, epoch_loss, accuracy.top1, accuracy.top5, learning_rate))
            logger.info(
                "epoch_complete",
                mode=cfg.mode,
                epoch=epoch,
                total=epoch_loss.total,
                val_top1=accuracy.top1,
                val_top5=accuracy.top5,
                lr=learning_rate,
            )
            if accuracy.top1 > best_top1:
                best_top1, best_epoch = accuracy.top1, epoch
                save_checkpoint(checkpoint_path, header, state.student_side())

    if teacher is not None:
        after = parameter_checksum(teacher)
        if after != teacher_checksum:
            raise TeacherMutatedError(f"teacher checksum changed from {teacher_checksum} to {after}")

    report = TrainReport(
        mode=cfg.mode,
        seed=cfg.seed,
        epochs=summaries,
        best_val_top1=best_top1,
        best_epoch=best_epoch,
        checkpoint_path=str(checkpoint_path),
        metrics_path=str(metrics_path),
        wall_clock_seconds=time.perf_counter() - started,
        teacher_checksum=teacher_checksum,
    )
    report.save(out_dir / REPORT_FILE)
    logger.info("run_complete", mode=cfg.mode, seed=cfg.seed, best_val_top1=best_top1, out_dir=str(out_dir))
    return report


def pretrain_teacher(cfg: ExperimentConfig) -> TrainReport:
    """Cross-entropy run of the teacher architecture; its best checkpoint is the teacher"""
    teacher_cfg = with_overrides(
        cfg,
        {
            "mode": "ce_only",
            "student.architecture": cfg.teacher.architecture,
            "student.init_from_teacher": False,
            "teacher.checkpoint": None,
        },
    )
    return run_experiment(teacher_cfg)


@dataclass
class ModeSummary:
    mode: str
    best_val_top1: List[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.best_val_top1)

    @property
    def stdev(self) -> float:
        return statistics.stdev(self.best_val_top1) if len(self.best_val_top1) > 1 else 0.0


@dataclass
class ComparisonReport:
    seeds: List[int]
    modes: Dict[str, ModeSummary]
    teacher_top1: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seeds": self.seeds,
            "teacher_top1": self.teacher_top1,
            "modes": {
                name: {"best_val_top1": summary.best_val_top1, "mean": summary.mean, "stdev": summary.stdev}
                for name, summary in self.modes.items()
            },
        }


def compare_modes(cfg: ExperimentConfig, modes: Sequence[str], seeds: Sequence[int]) -> ComparisonReport:
    """Run every mode over every seed with the same budget and data"""
    if not modes or not seeds:
        raise ValueError("compare_modes needs at least one mode and one seed")
    base_dir = Path(cfg.out_dir)
    results = {mode: ModeSummary(mode) for mode in modes}
    for mode in modes:
        for seed in seeds:
            run_cfg = with_overrides(
                cfg, {"mode": mode, "seed": seed, "out_dir": str(base_dir / mode / f"seed{seed}")}
            )
            report = run_experiment(run_cfg)
            results[mode].best_val_top1.append(report.best_val_top1)

    teacher_top1 = None
    if cfg.teacher.checkpoint is not None and Path(cfg.teacher.checkpoint).is_file():
        dtype = resolve_dtype(cfg.dtype)
        splits = build_datasets(cfg.dataset)
        teacher_top1 = eval_top1(
            cfg.teacher.checkpoint,
            splits.val,
            batch_size=cfg.batch_size,
            device=select_device(cfg.device, cfg.dtype),
            dtype=dtype,
        )

    comparison = ComparisonReport(seeds=list(seeds), modes=results, teacher_top1=teacher_top1)
    base_dir.mkdir(parents=True, exist_ok=True)
    (base_dir / "compare.json").write_text(json.dumps(comparison.to_dict(), indent=2) + "\n")
    logger.info(
        "comparison_complete",
        teacher_top1=teacher_top1,
        **{f"{name}_mean": summary.mean for name, summary in results.items()},
    )
    return comparison
