"""Conditional Gaussian structure of the model given the mixing values."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg

from .core_types import ModelParams
from .special_functions import mixing_vectors

LOG_2PI = np.log(2.0 * np.pi)


def spd_cholesky(A: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, retrying once with a small symmetric jitter."""
    A = 0.5 * (A + A.T)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(A) / A.shape[0]
        try:
            return np.linalg.cholesky(A + jitter * np.eye(A.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("matrix is not positive definite") from exc


def spd_inverse_logdet(A: np.ndarray) -> tuple[np.ndarray, float]:
    L = spd_cholesky(A)
    Linv = linalg.solve_triangular(L, np.eye(A.shape[0]), lower=True)
    return Linv.T @ Linv, 2.0 * float(np.sum(np.log(np.diag(L))))


@dataclass(frozen=True)
class ConditionalBlocks:
    """Moments of ``(X, Y)`` given fixed mixing vectors ``u`` and ``v``.

    ``mu_x`` is a function of the full observation row ``y``; the posterior
    covariance ``Sigma_x`` does not depend on ``y``.
    """

    M: np.ndarray
    N: np.ndarray
    mu_x: Callable[[np.ndarray], np.ndarray]
    Sigma_x: np.ndarray
    mu_y: np.ndarray
    Sigma_y: np.ndarray
    u: np.ndarray
    v: np.ndarray


def conditional_blocks(params: ModelParams, u, v) -> ConditionalBlocks:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(u <= 0) or np.any(v <= 0):
        raise ValueError("mixing values must be positive")
    W, s2 = params.W, params.sigma2
    DeW = u[:, None] * W
    M = s2 * np.diag(v) + W.T @ DeW
    Minv, _ = spd_inverse_logdet(M)
    N = np.diag(u) - DeW @ Minv @ DeW.T
    N = 0.5 * (N + N.T)
    Ninv, _ = spd_inverse_logdet(N)
    Sigma_y = s2 * Ninv
    mu_y = params.mu + params.delta_eps / u + (params.delta_x / v) @ W.T
    shift = params.mu + params.delta_eps / u
    dx = params.delta_x

    def mu_x(y):
        y = np.asarray(y, dtype=float)
        return ((y - shift) @ DeW + s2 * dx) @ Minv

    return ConditionalBlocks(M, N, mu_x, s2 * Minv, mu_y, Sigma_y, u, v)


def gaussian_condition(mu, Sigma, observed_idx, observed_values):
    """Condition a Gaussian on a subset of its coordinates.

    Returns
    -------
    mu_cond, Sigma_cond
        Moments of the remaining coordinates in their original order.
    """
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    d = mu.size
    o = np.asarray(observed_idx, dtype=int)
    if o.size == 0 or o.size >= d:
        raise ValueError("observed index set must be a nonempty proper subset")
    m = np.setdiff1d(np.arange(d), o)
    S_oo = Sigma[np.ix_(o, o)]
    S_om = Sigma[np.ix_(o, m)]
    L = spd_cholesky(S_oo)
    K = linalg.cho_solve((L, True), S_om)  # S_oo^{-1} S_om
    resid = np.asarray(observed_values, dtype=float) - mu[o]
    mu_c = mu[m] + resid @ K
    S_c = Sigma[np.ix_(m, m)] - S_om.T @ K
    return mu_c, 0.5 * (S_c + S_c.T)


def _split(mask_row):
    mask_row = np.asarray(mask_row, dtype=bool)
    o = np.flatnonzero(mask_row)
    if o.size == 0:
        raise ValueError("row has no observed entries")
    return o, np.flatnonzero(~mask_row)


def missing_conditional(blocks: ConditionalBlocks, y_row, mask_row):
    """Law of the missing entries given the observed ones, for fixed mixing values.

    ``y_row`` is a full-length row; entries where ``mask_row`` is False are ignored.
    """
    o, m = _split(mask_row)
    if m.size == 0:
        return np.zeros(0), np.zeros((0, 0))
    y_row = np.asarray(y_row, dtype=float)
    return gaussian_condition(blocks.mu_y, blocks.Sigma_y, o, y_row[o])


def y_moments_given_missing(blocks: ConditionalBlocks, y_row, mask_row):
    """First and second non-central moments of the completed row."""
    o, m = _split(mask_row)
    y_row = np.asarray(y_row, dtype=float)
    Ey = np.zeros(y_row.size)
    Ey[o] = y_row[o]
    cov = np.zeros((y_row.size, y_row.size))
    if m.size:
        mu_m, S_m = missing_conditional(blocks, y_row, mask_row)
        Ey[m] = mu_m
        cov[np.ix_(m, m)] = S_m
    return Ey, cov + np.outer(Ey, Ey)


def log_observed_density(blocks: ConditionalBlocks, y_row, mask_row) -> float:
    """Log Gaussian density of the observed entries given the mixing values."""
    o, _ = _split(mask_row)
    r = np.asarray(y_row, dtype=float)[o] - blocks.mu_y[o]
    L = spd_cholesky(blocks.Sigma_y[np.ix_(o, o)])
    z = linalg.solve_triangular(L, r, lower=True)
    return float(-0.5 * (o.size * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + z @ z))


def log_m_function(params: ModelParams, y_row, mask_row, s_eps: float, s_x: float) -> float:
    """Log of the unit-square integrand whose double integral is the marginal density.

    Assembled from its factors: a skewness exponential, the observed-margin
    Gaussian density and a determinant prefactor. Both the exponential and
    the prefactor reduce to one identically, which the tests check.
    """
    mv = mixing_vectors(s_eps, s_x, params.nu_eps, params.nu_x)
    b = conditional_blocks(params, mv.u, mv.v)
    s2, W, dx = params.sigma2, params.W, params.delta_x
    k = params.k
    Minv = s2 ** -1 * b.Sigma_x
    DeW = mv.u[:, None] * W
    Ninv = b.Sigma_y / s2
    inner = np.diag(1.0 / mv.v) - s2 * Minv @ DeW.T @ Ninv @ DeW @ Minv - s2 * Minv
    log_skew = -0.5 * float(dx @ inner @ dx)
    _, logdet_M = spd_inverse_logdet(b.M)
    _, logdet_N = spd_inverse_logdet(b.N)
    log_pref = 0.5 * k * np.log(s2) + 0.5 * np.sum(np.log(mv.u)) + 0.5 * np.sum(np.log(mv.v)) - 0.5 * logdet_M - 0.5 * logdet_N
    value = log_skew + log_observed_density(b, y_row, mask_row) + log_pref
    if not np.isfinite(value):
        raise ArithmeticError(f"non-finite log m at node ({s_eps}, {s_x})")
    return value


def m_function(params: ModelParams, y_row, mask_row, s_eps: float, s_x: float) -> float:
    return float(np.exp(log_m_function(params, y_row, mask_row, s_eps, s_x)))
