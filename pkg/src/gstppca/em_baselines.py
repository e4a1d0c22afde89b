"""Closed-form Gaussian PPCA and the weighted Student-t PPCA fixed point."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_types import DataSet, ValidationError


@dataclass(frozen=True)
class BaselineEstimate:
    mu_hat: np.ndarray
    C_hat: np.ndarray
    W_hat: np.ndarray
    sigma2_hat: float
    weights: np.ndarray
    iterations: int = 0
    converged: bool = True


def _complete(data: DataSet, k: int) -> np.ndarray:
    if not data.complete:
        raise ValidationError("baseline estimators need complete data; use an EM kind for missing entries")
    if data.N < 2:
        raise ValidationError("need at least two rows")
    if not 1 <= k < data.d:
        raise ValidationError(f"need 1 <= k < d, got k={k}, d={data.d}")
    return np.asarray(data.Y, dtype=float)


def ppca_from_covariance(C: np.ndarray, k: int):
    """Maximum-likelihood ``(W, sigma2)`` for a given covariance.

    ``sigma2`` is the mean of the trailing ``d - k`` eigenvalues and
    ``W = U_k sqrt(Lambda_k - sigma2)``.
    """
    vals, vecs = np.linalg.eigh(0.5 * (C + C.T))
    vals, vecs = vals[::-1], vecs[:, ::-1]
    sigma2 = max(float(np.mean(vals[k:])), 0.0)
    W = vecs[:, :k] * np.sqrt(np.maximum(vals[:k] - sigma2, 0.0))
    return W, sigma2


def fit_gaussian_ppca(data: DataSet, k: int) -> BaselineEstimate:
    """Sample mean and (biased, 1/N) sample covariance with the PPCA factorization."""
    Y = _complete(data, k)
    mu = Y.mean(axis=0)
    R = Y - mu
    C = R.T @ R / Y.shape[0]
    if not np.trace(C) > 0:
        raise ValidationError("all rows are identical; the sample covariance is zero")
    W, sigma2 = ppca_from_covariance(C, k)
    return BaselineEstimate(mu, C, W, sigma2, np.ones(Y.shape[0]))


def fit_student_t_ppca(data: DataSet, k: int, nu: float, tol: float = 1e-8, max_iter: int = 10_000) -> BaselineEstimate:
    """Multivariate-t location/scatter by the reweighting fixed point.

    Weights are ``(nu + d) / (nu + D_t^2)`` with ``D_t`` the Mahalanobis
    distance at the current iterate; ``mu`` is the weighted mean and
    ``C = sum_t w_t r_t^T r_t / N``.
    """
    if not nu > 0:
        raise ValidationError("nu must be positive")
    Y = _complete(data, k)
    n, d = Y.shape
    if not np.ptp(Y, axis=0).max() > 0:
        raise ValidationError("all rows are identical; the scatter is zero")
    mu = np.median(Y, axis=0)
    R = Y - mu
    C = R.T @ R / n
    w = np.ones(n)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        L = _cholesky(C)
        z = np.linalg.solve(L, (Y - mu).T)
        w = (nu + d) / (nu + np.sum(z * z, axis=0))
        mu_new = w @ Y / w.sum()
        R = Y - mu_new
        C_new = (R * w[:, None]).T @ R / n
        change = max(
            np.max(np.abs(mu_new - mu)) / (np.max(np.abs(mu)) + np.sqrt(np.trace(C) / d)),
            np.max(np.abs(C_new - C)) / np.max(np.abs(C)),
        )
        mu, C = mu_new, 0.5 * (C_new + C_new.T)
        if change < tol:
            converged = True
            break
    W, sigma2 = ppca_from_covariance(C, k)
    return BaselineEstimate(mu, C, W, sigma2, w, it, converged)


def _cholesky(C):
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(C) / C.shape[0]
        try:
            return np.linalg.cholesky(C + jitter * np.eye(C.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("scatter iterate is singular") from exc
