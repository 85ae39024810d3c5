"""Exponential covariance construction and dense linear-algebra helpers.

Kernel parameterization: R_ij = exp(-d_ij / phi), i.e. phi is a *range*
parameter sitting in the denominator.  The uniform prior on phi over
(0, sqrt(2)) spans the diameter of the unit square, which only makes
sense for a range-style parameter.  Other conventions (exp(-phi * d))
will silently disagree with everything downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky
from scipy.spatial.distance import squareform, pdist


class FactorizationError(RuntimeError):
    """Cholesky failed even after the one-shot jitter retry."""

    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(f"matrix not positive definite (failing pivot {pivot})")


@dataclass(frozen=True)
class CovarianceParams:
    """Partial sill, range, and nugget of the exponential model."""

    sigma2: float
    phi: float
    tau2: float

    def __post_init__(self):
        for name in ("sigma2", "phi", "tau2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"{name} must be positive and finite, got {v}")


def exp_correlation(points: np.ndarray, phi: float) -> np.ndarray:
    """Exponential correlation matrix R_ij = exp(-||s_i - s_j|| / phi)."""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if points.size == 0:
        raise ValueError("points must be nonempty")
    if not np.all(np.isfinite(points)):
        raise ValueError("non-finite coordinates")
    if phi <= 0:
        raise ValueError(f"phi must be positive, got {phi}")
    dists = squareform(pdist(points))
    return np.exp(-dists / phi)


def build_sigma(R: np.ndarray, params: CovarianceParams) -> np.ndarray:
    """Sigma = sigma2 * R + tau2 * I."""
    R = np.asarray(R, dtype=float)
    n = R.shape[0]
    if R.shape != (n, n):
        raise ValueError(f"R must be square, got {R.shape}")
    return params.sigma2 * R + params.tau2 * np.eye(n)


def chol_factor(A: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L @ L.T = A.

    If the factorization fails (near-coincident points), adds
    1e-10 * trace(A)/n of jitter to the diagonal once and retries;
    a second failure raises FactorizationError.
    """
    A = np.asarray(A, dtype=float)
    try:
        return cholesky(A, lower=True)
    except np.linalg.LinAlgError:
        pass
    n = A.shape[0]
    jitter = 1e-10 * np.trace(A) / n
    try:
        return cholesky(A + jitter * np.eye(n), lower=True)
    except np.linalg.LinAlgError as exc:
        pivot = _failing_pivot(str(exc))
        raise FactorizationError(pivot) from exc


def _failing_pivot(message: str) -> int:
    # scipy reports "k-th leading minor ... not positive definite"
    for token in message.split():
        head = token.split("-")[0]
        if head.isdigit():
            return int(head)
    return -1


def chol_solve(factor: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve A x = rhs given the lower factor of A."""
    return cho_solve((factor, True), np.asarray(rhs, dtype=float))


def log_det(factor: np.ndarray) -> float:
    """log|A| from its lower Cholesky factor."""
    return 2.0 * float(np.sum(np.log(np.diag(factor))))


def snr(beta: float, sigma: np.ndarray) -> float:
    """Signal-to-noise ratio beta^2 / (lambda_max(Sigma) * cond(Sigma))."""
    eigvals = np.linalg.eigvalsh(np.asarray(sigma, dtype=float))
    lam_min, lam_max = eigvals[0], eigvals[-1]
    if lam_min <= 0:
        raise ValueError("Sigma must be positive definite")
    return float(beta**2 / (lam_max * (lam_max / lam_min)))
