#!/usr/bin/env python3
"""
Gaussian KL Divergence Kernels
Closed-form KL divergence between multivariate Gaussians (diagonal and
full covariance) plus an independent Monte-Carlo estimator used as the
verification oracle.

Argument order: kl_diag(q, p) and kl_full(q, p) compute KL(q || p) with the
student distribution first. The logits loss in kd_losses uses the
opposite order (teacher first), as classic logits distillation does; the
two orderings are kept as-is rather than unified.

All math runs in float64 whatever the training precision is.
"""

from dataclasses import dataclass, field
from typing import Union

import numpy as np
import torch
from scipy import stats


SYMMETRY_TOLERANCE = 1e-8


class DistributionContractError(ValueError):
    """Invalid distribution parameters or mismatched dimensions"""


class NonFiniteParameterError(DistributionContractError):
    """Mean, variance or covariance holds NaN or infinity"""


class NotPositiveDefiniteError(DistributionContractError):
    """Covariance factorization failed"""

    def __init__(self, message: str, smallest_pivot: float):
        super().__init__(f"{message} (smallest pivot {smallest_pivot:.6g})")
        self.smallest_pivot = smallest_pivot


def _as_float64(value) -> torch.Tensor:
    return torch.as_tensor(value, dtype=torch.float64)


@dataclass(frozen=True)
class DiagGaussian:
    """Gaussian with diagonal covariance; leading dimensions are batch dims"""
    mean: torch.Tensor
    var: torch.Tensor

    def __post_init__(self):
        mean = _as_float64(self.mean)
        var = _as_float64(self.var)
        if mean.dim() < 1 or mean.shape[-1] < 1:
            raise DistributionContractError(f"mean must have at least one dimension, got shape {tuple(mean.shape)}")
        if mean.shape != var.shape:
            raise DistributionContractError(
                f"mean shape {tuple(mean.shape)} does not match var shape {tuple(var.shape)}"
            )
        if not bool(torch.isfinite(mean).all()):
            raise NonFiniteParameterError("mean contains non-finite entries")
        if not bool(torch.isfinite(var).all()):
            raise NonFiniteParameterError("var contains non-finite entries")
        if not bool((var > 0).all()):
            raise DistributionContractError(f"var must be strictly positive, min is {float(var.min()):.6g}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def k(self) -> int:
        return int(self.mean.shape[-1])

    def as_full(self) -> "FullGaussian":
        if self.mean.dim() != 1:
            raise DistributionContractError("only an unbatched DiagGaussian converts to FullGaussian")
        return FullGaussian(self.mean, torch.diag(self.var))


def _elimination_pivots(matrix: np.ndarray) -> np.ndarray:
    """Pivots of symmetric Gaussian elimination without row exchange.

    These are the diagonal of D in A = L D L^T, stopping at the first
    non-positive pivot.
    """
    work = np.array(matrix, dtype=np.float64, copy=True)
    size = work.shape[0]
    pivots = []
    for j in range(size):
        pivot = work[j, j]
        pivots.append(pivot)
        if not np.isfinite(pivot) or pivot <= 0.0:
            break
        work[j + 1:, j + 1:] -= np.outer(work[j + 1:, j], work[j, j + 1:]) / pivot
    return np.asarray(pivots)


@dataclass(frozen=True)
class FullGaussian:
    """Gaussian with dense covariance; the Cholesky factor is computed once"""
    mean: torch.Tensor
    cov: torch.Tensor
    scale_tril: torch.Tensor = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = _as_float64(self.mean)
        cov = _as_float64(self.cov)
        if mean.dim() != 1 or mean.shape[0] < 1:
            raise DistributionContractError(f"mean must be a non-empty vector, got shape {tuple(mean.shape)}")
        k = mean.shape[0]
        if tuple(cov.shape) != (k, k):
            raise DistributionContractError(f"cov must be {k}x{k}, got shape {tuple(cov.shape)}")
        if not bool(torch.isfinite(mean).all()) or not bool(torch.isfinite(cov).all()):
            raise NonFiniteParameterError("mean or cov contains non-finite entries")
        asymmetry = float((cov - cov.T).abs().max())
        if asymmetry > SYMMETRY_TOLERANCE:
            raise DistributionContractError(f"cov is not symmetric (max |C - C^T| = {asymmetry:.3g})")

        scale_tril, info = torch.linalg.cholesky_ex(cov)
        if int(info) != 0:
            pivots = _elimination_pivots(cov.detach().cpu().numpy())
            raise NotPositiveDefiniteError("covariance is not positive definite", float(pivots.min()))

        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "scale_tril", scale_tril)

    @property
    def k(self) -> int:
        return int(self.mean.shape[0])

    def log_det(self) -> torch.Tensor:
        return 2.0 * torch.log(torch.diagonal(self.scale_tril)).sum()


Gaussian = Union[DiagGaussian, FullGaussian]


def _check_same_dimension(q: Gaussian, p: Gaussian) -> None:
    if q.k != p.k:
        raise DistributionContractError(f"dimension mismatch: q has k={q.k}, p has k={p.k}")


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last dimension.

    Returns a tensor with the batch shape of the inputs (0-dim when
    unbatched). Differentiable in all four parameter tensors.
    """
    _check_same_dimension(q, p)
    if q.mean.shape != p.mean.shape:
        raise DistributionContractError(
            f"batch shape mismatch: {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}"
        )
    ratio = q.var / p.var
    mahalanobis = (p.mean - q.mean).pow(2) / p.var
    return 0.5 * (ratio + mahalanobis - 1.0 + torch.log(p.var) - torch.log(q.var)).sum(dim=-1)


def kl_full(q: FullGaussian, p: FullGaussian) -> torch.Tensor:
    """KL(q || p) for dense covariances via the Cholesky factor of p.cov.

    tr(P^-1 Q) is ||L_p^-1 L_q||_F^2 and the Mahalanobis term is
    ||L_p^-1 (mu_p - mu_q)||^2; no explicit inverse or determinant.
    """
    _check_same_dimension(q, p)
    whitened_scale = torch.linalg.solve_triangular(p.scale_tril, q.scale_tril, upper=False)
    trace_term = whitened_scale.pow(2).sum()
    diff = (p.mean - q.mean).unsqueeze(-1)
    mahalanobis = torch.linalg.solve_triangular(p.scale_tril, diff, upper=False).pow(2).sum()
    return 0.5 * (trace_term + mahalanobis - q.k + p.log_det() - q.log_det())


@dataclass(frozen=True)
class MonteCarloEstimate:
    estimate: float
    stderr: float
    n_samples: int

    def within(self, reference: float, n_stderr: float = 3.0, relative: float = 0.0) -> bool:
        tolerance = max(n_stderr * self.stderr, relative * abs(reference))
        return abs(self.estimate - reference) <= tolerance


def kl_monte_carlo(
    q: Gaussian,
    p: Gaussian,
    n_samples: int,
    seed: int,
    chunk_size: int = 250_000,
) -> MonteCarloEstimate:
    """Estimate KL(q || p) as the sample mean of log q(x) - log p(x), x ~ q.

    Densities come from scipy.stats, independent of the closed forms.
    The RNG is owned by the call, so results depend only on the seed.
    """
    if type(q) is not type(p):
        raise DistributionContractError(f"q and p must be the same kind, got {type(q).__name__} and {type(p).__name__}")
    _check_same_dimension(q, p)
    if n_samples < 1:
        raise DistributionContractError(f"n_samples must be >= 1, got {n_samples}")
    if q.mean.dim() != 1:
        raise DistributionContractError("Monte-Carlo estimation expects unbatched distributions")

    rng = np.random.default_rng(seed)
    k = q.k
    mean_q = q.mean.detach().cpu().numpy()
    mean_p = p.mean.detach().cpu().numpy()

    if isinstance(q, DiagGaussian):
        std_q = np.sqrt(q.var.detach().cpu().numpy())
        std_p = np.sqrt(p.var.detach().cpu().numpy())

        def draw(n: int) -> np.ndarray:
            return mean_q + std_q * rng.standard_normal((n, k))

        def log_ratio(x: np.ndarray) -> np.ndarray:
            return stats.norm.logpdf(x, mean_q, std_q).sum(axis=1) - stats.norm.logpdf(x, mean_p, std_p).sum(axis=1)
    else:
        cov_q = q.cov.detach().cpu().numpy()
        dist_q = stats.multivariate_normal(mean_q, cov_q)
        dist_p = stats.multivariate_normal(mean_p, p.cov.detach().cpu().numpy())

        def draw(n: int) -> np.ndarray:
            return rng.multivariate_normal(mean_q, cov_q, size=n, method="cholesky")

        def log_ratio(x: np.ndarray) -> np.ndarray:
            return np.atleast_1d(dist_q.logpdf(x)) - np.atleast_1d(dist_p.logpdf(x))

    values = np.empty(n_samples, dtype=np.float64)
    for start in range(0, n_samples, chunk_size):
        stop = min(start + chunk_size, n_samples)
        values[start:stop] = log_ratio(draw(stop - start))

    estimate = float(values.mean())
    stderr = float(values.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else float("inf")
    return MonteCarloEstimate(estimate=estimate, stderr=stderr, n_samples=n_samples)
