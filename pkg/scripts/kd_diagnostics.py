#!/usr/bin/env python3
"""
Distillation Diagnostics
Accuracy evaluation, the teacher/student logits-gap CDF, the difference of
logit correlation matrices, and the closed-form KL self-check against the
Monte-Carlo oracle.
"""

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from kd_datasets import ArrayDataset, LabeledBatch, make_loader
from kd_distributions import DiagGaussian, FullGaussian, kl_diag, kl_full, kl_monte_carlo
from kd_logging import get_logger
from staged_backbones import load_backbone

logger = get_logger(__name__)

ModelSource = Union[nn.Module, str, Path]

CDF_HEADER_NOTE = "# per-element |z_teacher - z_student| pooled over samples and classes"
KL_RELATIVE_TOLERANCE = 0.02
KL_STDERR_MULTIPLE = 3.0
DIAGONAL_REDUCTION_TOLERANCE = 1e-10
# log-variance of the near-singular case included in every self-check
ADVERSARIAL_LOG_VARIANCE = -10.0


class DiagnosticsError(ValueError):
    """Diagnostics inputs are inconsistent or too small"""


@dataclass(frozen=True)
class AccuracyResult:
    top1: float
    top5: float
    count: int


@dataclass
class DiagnosticsReport:
    top1: float
    cdf_points: List[Tuple[float, float]]
    corr_diff: np.ndarray
    mean_abs_logit_gap: float

    def summary(self) -> Dict[str, Any]:
        return {
            "top1": self.top1,
            "mean_abs_logit_gap": self.mean_abs_logit_gap,
            "max_corr_diff": float(self.corr_diff.max()) if self.corr_diff.size else 0.0,
            "cdf_points": len(self.cdf_points),
        }


def topk_correct(logits: torch.Tensor, labels: torch.Tensor, k: int) -> int:
    k = min(k, logits.shape[1])
    if k == 1:
        # argmax keeps the first maximal index, so ties resolve to the lowest class
        return int((logits.argmax(dim=1) == labels).sum())
    top = logits.topk(k, dim=1).indices
    return int((top == labels.unsqueeze(1)).any(dim=1).sum())


@torch.no_grad()
def evaluate_model(
    model: nn.Module,
    batches: Iterable[LabeledBatch],
    device: Union[str, torch.device] = "cpu",
    dtype: torch.dtype = torch.float64,
) -> AccuracyResult:
    """Top-1 / top-5 accuracy in percent; the model is left in eval mode"""
    model.eval()
    correct1 = correct5 = total = 0
    for batch in batches:
        logits = model(batch.images.to(device=device, dtype=dtype))
        labels = batch.labels.to(logits.device)
        correct1 += topk_correct(logits, labels, 1)
        correct5 += topk_correct(logits, labels, 5)
        total += len(batch)
    if total == 0:
        raise DiagnosticsError("cannot evaluate on an empty split")
    return AccuracyResult(top1=100.0 * correct1 / total, top5=100.0 * correct5 / total, count=total)


def resolve_model(
    source: ModelSource,
    split: ArrayDataset,
    device: Union[str, torch.device] = "cpu",
    dtype: torch.dtype = torch.float64,
) -> nn.Module:
    if isinstance(source, nn.Module):
        return source.to(device=device, dtype=dtype)
    net, _ = load_backbone(source, expected_classes=split.class_count, dtype=dtype, device=device)
    return net


@torch.no_grad()
def collect_logits(
    source: ModelSource,
    split: ArrayDataset,
    batch_size: int = 256,
    device: Union[str, torch.device] = "cpu",
    dtype: torch.dtype = torch.float64,
) -> Tuple[np.ndarray, np.ndarray]:
    """(N, C) logits and (N,) labels over a split, in split order"""
    if len(split) == 0:
        raise DiagnosticsError("split is empty")
    model = resolve_model(source, split, device, dtype)
    model.eval()
    logits, labels = [], []
    for batch in make_loader(split, batch_size, seed=0, shuffle=False, dtype=dtype):
        logits.append(model(batch.images.to(device)).detach().cpu().to(torch.float64).numpy())
        labels.append(batch.labels.numpy())
    return np.concatenate(logits), np.concatenate(labels)


def eval_top1(
    source: ModelSource,
    split: ArrayDataset,
    batch_size: int = 256,
    device: Union[str, torch.device] = "cpu",
    dtype: torch.dtype = torch.float64,
) -> float:
    model = resolve_model(source, split, device, dtype)
    loader = make_loader(split, batch_size, seed=0, shuffle=False, dtype=dtype)
    return evaluate_model(model, loader, device, dtype).top1


def _paired_logits(teacher: ModelSource, student: ModelSource, split: ArrayDataset, **kwargs) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    teacher_logits, labels = collect_logits(teacher, split, **kwargs)
    student_logits, _ = collect_logits(student, split, **kwargs)
    if teacher_logits.shape[1] != student_logits.shape[1]:
        raise DiagnosticsError(
            f"class count mismatch: teacher has {teacher_logits.shape[1]}, student has {student_logits.shape[1]}"
        )
    return teacher_logits, student_logits, labels


def empirical_cdf(differences: np.ndarray, n_points: int) -> List[Tuple[float, float]]:
    """Empirical CDF of `differences` at n_points equally spaced x in [0, max]"""
    if n_points < 2:
        raise DiagnosticsError(f"n_points must be >= 2, got {n_points}")
    values = np.sort(np.asarray(differences, dtype=np.float64).ravel())
    if values.size == 0:
        raise DiagnosticsError("no differences to summarise")
    xs = np.linspace(0.0, values[-1], n_points)
    ys = np.searchsorted(values, xs, side="right") / values.size
    return [(float(x), float(y)) for x, y in zip(xs, ys)]


def logits_cdf(teacher: ModelSource, student: ModelSource, split: ArrayDataset, n_points: int = 101, **kwargs) -> List[Tuple[float, float]]:
    teacher_logits, student_logits, _ = _paired_logits(teacher, student, split, **kwargs)
    return empirical_cdf(np.abs(teacher_logits - student_logits), n_points)


def correlation_matrix(logits: np.ndarray, name: str = "logits") -> np.ndarray:
    """Pearson correlation between logit dimensions across samples.

    Rows and columns of zero-variance dimensions are 0 (diagonal included).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 2:
        raise DiagnosticsError(f"need at least 2 samples of (N, C) logits, got shape {logits.shape}")
    centered = logits - logits.mean(axis=0, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=0))
    degenerate = norms <= 1e-12 * max(1.0, float(np.abs(logits).max()))
    if degenerate.any():
        logger.warning("zero_variance_logit_dims", source=name, dims=np.flatnonzero(degenerate).tolist())
    safe = np.where(degenerate, 1.0, norms)
    corr = (centered.T @ centered) / np.outer(safe, safe)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    corr[degenerate, :] = 0.0
    corr[:, degenerate] = 0.0
    return np.clip(corr, -1.0, 1.0)


def correlation_difference(teacher_logits: np.ndarray, student_logits: np.ndarray) -> np.ndarray:
    return np.abs(correlation_matrix(teacher_logits, "teacher") - correlation_matrix(student_logits, "student"))


def corr_matrix_diff(teacher: ModelSource, student: ModelSource, split: ArrayDataset, **kwargs) -> np.ndarray:
    if len(split) < 2:
        raise DiagnosticsError(f"correlation needs at least 2 samples, split has {len(split)}")
    teacher_logits, student_logits, _ = _paired_logits(teacher, student, split, **kwargs)
    return correlation_difference(teacher_logits, student_logits)


def diagnose(
    teacher: ModelSource,
    student: ModelSource,
    split: ArrayDataset,
    n_points: int = 101,
    **kwargs,
) -> DiagnosticsReport:
    """All diagnostics from a single pass over the split"""
    if len(split) < 2:
        raise DiagnosticsError(f"diagnostics need at least 2 samples, split has {len(split)}")
    teacher_logits, student_logits, labels = _paired_logits(teacher, student, split, **kwargs)
    gap = np.abs(teacher_logits - student_logits)
    top1 = 100.0 * float((student_logits.argmax(axis=1) == labels).mean())
    report = DiagnosticsReport(
        top1=top1,
        cdf_points=empirical_cdf(gap, n_points),
        corr_diff=correlation_difference(teacher_logits, student_logits),
        mean_abs_logit_gap=float(gap.mean()),
    )
    logger.info("diagnostics_complete", **report.summary())
    return report


def write_cdf_csv(path: Union[str, Path], points: List[Tuple[float, float]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [CDF_HEADER_NOTE, "x,y"] + [f"{x:.17g},{y:.17g}" for x, y in points]
    path.write_text("\n".join(lines) + "\n")
    return path


def write_corr_csv(path: Union[str, Path], matrix: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"C={matrix.shape[0]}"] + [",".join(f"{value:.17g}" for value in row) for row in matrix]
    path.write_text("\n".join(lines) + "\n")
    return path


# KL self-check


@dataclass(frozen=True)
class SelfCheckCase:
    index: int
    kind: str
    k: int
    closed_form: float
    reference: float
    deviation: float
    tolerance: float
    passed: bool


@dataclass
class SelfCheckSummary:
    seed: int
    n_cases: int
    n_samples: int
    cases: List[SelfCheckCase] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(case.passed for case in self.cases)

    @property
    def failures(self) -> List[SelfCheckCase]:
        return [case for case in self.cases if not case.passed]

    def max_deviation(self, kind: str) -> float:
        deviations = [case.deviation for case in self.cases if case.kind == kind]
        return max(deviations) if deviations else 0.0

    def as_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "n_cases": self.n_cases,
            "n_samples": self.n_samples,
            "passed": self.passed,
            "max_deviation": {kind: self.max_deviation(kind) for kind in ("diag", "full", "reduction")},
            "cases": [asdict(case) for case in self.cases],
        }


def _random_diag(rng: np.random.Generator, k: int) -> DiagGaussian:
    return DiagGaussian(mean=rng.normal(0.0, 1.0, k), var=np.exp(rng.uniform(-1.0, 1.0, k)))


def _random_full(rng: np.random.Generator, k: int) -> FullGaussian:
    factor = rng.normal(0.0, 1.0, (k, k))
    cov = factor @ factor.T / k + 0.5 * np.eye(k)
    return FullGaussian(mean=rng.normal(0.0, 1.0, k), cov=0.5 * (cov + cov.T))


def _oracle_case(index: int, kind: str, q, p, closed: float, n_samples: int, seed: int) -> SelfCheckCase:
    estimate = kl_monte_carlo(q, p, n_samples=n_samples, seed=seed)
    tolerance = max(KL_STDERR_MULTIPLE * estimate.stderr, KL_RELATIVE_TOLERANCE * abs(closed))
    deviation = abs(estimate.estimate - closed)
    return SelfCheckCase(
        index=index,
        kind=kind,
        k=q.k,
        closed_form=closed,
        reference=estimate.estimate,
        deviation=deviation,
        tolerance=tolerance,
        passed=math.isfinite(closed) and deviation <= tolerance,
    )


def _reduction_case(index: int, q: DiagGaussian, p: DiagGaussian) -> SelfCheckCase:
    diag = float(kl_diag(q, p))
    full = float(kl_full(q.as_full(), p.as_full()))
    deviation = abs(full - diag)
    return SelfCheckCase(
        index=index,
        kind="reduction",
        k=q.k,
        closed_form=diag,
        reference=full,
        deviation=deviation,
        tolerance=DIAGONAL_REDUCTION_TOLERANCE,
        passed=deviation <= DIAGONAL_REDUCTION_TOLERANCE,
    )


def kl_selfcheck(n_cases: int, seed: int, n_samples: int = 10**6, max_dim: int = 8) -> SelfCheckSummary:
    """Closed-form KL against the Monte-Carlo oracle plus the diagonal reduction.

    Each case draws one diagonal pair, one full-covariance pair and one
    diagonal pair compared through kl_full. A near-singular diagonal pair
    (variance e^-10 against (0.3, 1)) is appended to every run.
    """
    if n_cases < 1:
        raise DiagnosticsError(f"n_cases must be >= 1, got {n_cases}")
    rng = np.random.default_rng(seed)
    summary = SelfCheckSummary(seed=seed, n_cases=n_cases, n_samples=n_samples)

    for index in range(n_cases):
        k = int(rng.integers(1, max_dim + 1))
        q, p = _random_diag(rng, k), _random_diag(rng, k)
        summary.cases.append(
            _oracle_case(index, "diag", q, p, float(kl_diag(q, p)), n_samples, int(rng.integers(2**32)))
        )
        qf, pf = _random_full(rng, k), _random_full(rng, k)
        summary.cases.append(
            _oracle_case(index, "full", qf, pf, float(kl_full(qf, pf)), n_samples, int(rng.integers(2**32)))
        )
        summary.cases.append(_reduction_case(index, _random_diag(rng, k), _random_diag(rng, k)))

    q = DiagGaussian(mean=np.zeros(2), var=np.full(2, math.exp(ADVERSARIAL_LOG_VARIANCE)))
    p = DiagGaussian(mean=np.full(2, 0.3), var=np.ones(2))
    summary.cases.append(_oracle_case(n_cases, "diag", q, p, float(kl_diag(q, p)), n_samples, int(rng.integers(2**32))))

    logger.info(
        "kl_selfcheck_complete",
        seed=seed,
        cases=len(summary.cases),
        failures=len(summary.failures),
        max_diag_deviation=summary.max_deviation("diag"),
        max_full_deviation=summary.max_deviation("full"),
        max_reduction_deviation=summary.max_deviation("reduction"),
    )
    return summary
