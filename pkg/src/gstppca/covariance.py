"""Model-implied covariance of the observations and its eigendecomposition."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_types import ModelKind, ModelParams, collapse_kind
from .quadrature import gauss_legendre_unit
from .special_functions import inv_mixing_moments, scaling_map

# power substitution s = t**P tames the s -> 0 growth of 1/T(s)
_POWER = 4


@dataclass(frozen=True)
class CovarianceReport:
    cov: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    left_singular_W: np.ndarray
    defined: dict = field(default_factory=dict)


def inverse_mixing_moments(nu, n: int = 256):
    """Mean vector and covariance matrix of ``1/T(S)`` for co-monotone margins.

    ``T_i(s) = chi2_quantile(nu_i, s) / nu_i`` share one uniform ``S``. The
    mean is closed form; the covariance is a 1-D Gauss-Legendre integral.

    Returns
    -------
    mean : ndarray (p,)
    cov : ndarray (p, p)
        ``nan`` wherever a margin has ``nu <= 4``.
    """
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    p = nu.size
    mean = np.array([inv_mixing_moments(x)[0] for x in nu])
    cov = np.full((p, p), np.nan)
    ok = (nu > 4) & np.isfinite(nu)
    fin_ok = np.flatnonzero(ok)
    # infinite margins are constant: zero covariance with everything
    inf_idx = np.flatnonzero(np.isinf(nu))
    cov[inf_idx, :] = 0.0
    cov[:, inf_idx] = 0.0
    bad = np.flatnonzero(nu <= 4)
    cov[bad, :] = np.nan
    cov[:, bad] = np.nan
    if fin_ok.size:
        t, w = gauss_legendre_unit(n)
        s = t**_POWER
        jac = _POWER * t ** (_POWER - 1)
        inv_T = 1.0 / scaling_map(s[:, None], nu[fin_ok][None, :])
        centred = inv_T - mean[fin_ok]
        block = (centred * (w * jac)[:, None]).T @ centred
        cov[np.ix_(fin_ok, fin_ok)] = block
    return mean, cov


def eigendecompose(cov: np.ndarray):
    """Descending eigenpairs; each eigenvector's largest-magnitude entry is positive."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance must be square")
    scale = max(np.abs(cov).max(), 1e-300)
    if np.abs(cov - cov.T).max() > 1e-8 * scale:
        raise ValueError("covariance is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    pivot = np.abs(vecs).argmax(axis=0)
    signs = np.sign(vecs[pivot, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vals, vecs * signs


def proportion_of_variance(eigvals):
    """Shares ``lambda_i / sum(lambda)`` and ratios ``lambda_1 / lambda_i``."""
    lam = np.asarray(eigvals, dtype=float)
    if np.any(lam < 0):
        raise ValueError("eigenvalues must be non-negative")
    total = lam.sum()
    if total <= 0:
        raise ValueError("all-zero spectrum")
    with np.errstate(divide="ignore", over="ignore"):
        ratios = np.where(lam > 0, lam[0] / np.where(lam > 0, lam, 1.0), np.inf)
    return lam / total, ratios


def model_covariance(params: ModelParams, kind: ModelKind | str | None = None, n: int = 256) -> CovarianceReport:
    """``Cov[Y] = W Cov[X] W^T + Cov[eps]``.

    With one degree of freedom per vector the inverse-mixing moments are
    closed form; otherwise the co-monotone covariance of the inverse mixing
    values enters through Hadamard products with the skewness outer products.
    """
    kind = collapse_kind(params) if kind is None else ModelKind.parse(kind)
    W = params.W
    if kind is ModelKind.StudentTPPCA:
        nu = float(params.nu_eps[0])
        m, _ = inv_mixing_moments(nu)
        cov = m * (W @ W.T + params.sigma2 * np.eye(params.d))
        defined = {"mean": bool(nu > 2), "cov": bool(nu > 2)}
    else:
        mx, Cx = _moments(params.nu_x, n)
        me, Ce = _moments(params.nu_eps, n)
        dx, de = params.delta_x, params.delta_eps
        cov_x = np.diag(mx) + _hadamard_outer(Cx, dx)
        cov_e = params.sigma2 * np.diag(me) + _hadamard_outer(Ce, de)
        cov = W @ cov_x @ W.T + cov_e
        defined = {
            "mean": bool(np.all(params.nu_eps > 2) and np.all(params.nu_x > 2)),
            "cov": bool(np.all(np.isfinite(cov))),
        }
    U = np.linalg.svd(W, full_matrices=False)[0]
    if defined["cov"]:
        cov = 0.5 * (cov + cov.T)
        vals, vecs = eigendecompose(cov)
    else:
        cov = np.full((params.d, params.d), np.nan)
        vals = np.full(params.d, np.nan)
        vecs = np.full((params.d, params.d), np.nan)
    return CovarianceReport(cov, vals, vecs, U, defined)


def _moments(nu, n):
    nu = np.asarray(nu, dtype=float)
    if np.all(nu == nu[0]):
        m, v = inv_mixing_moments(nu[0])
        # a single shared uniform makes the inverse mixing values identical
        return np.full(nu.size, m), np.full((nu.size, nu.size), v)
    return inverse_mixing_moments(nu, n)


def _hadamard_outer(C, delta):
    """``C o (delta^T delta)``, treating ``0 * undefined`` as zero."""
    outer = np.outer(delta, delta)
    with np.errstate(invalid="ignore"):
        out = C * outer
    out[outer == 0] = 0.0
    return out
