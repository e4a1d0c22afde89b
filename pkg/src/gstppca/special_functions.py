"""Chi-square quantiles and the uniform-to-Gamma scaling maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special


@dataclass(frozen=True)
class MixingVectors:
    """Mixing values for one pair of uniforms.

    Attributes
    ----------
    u : ndarray, shape (d,)
        Error-term mixing vector.
    v : ndarray, shape (k,)
        Latent-factor mixing vector.
    """

    u: np.ndarray
    v: np.ndarray
    s_eps: float
    s_x: float


def _chi2_logpdf(x, nu):
    h = 0.5 * nu
    with np.errstate(divide="ignore", invalid="ignore"):
        return (h - 1.0) * np.log(x) - 0.5 * x - h * np.log(2.0) - special.gammaln(h)


def _initial_guess(nu, p, q):
    """Wilson-Hilferty guess plus a guaranteed lower bound.

    ``P(a, y) <= y**a / Gamma(a + 1)``, so solving the right side for ``y``
    gives a point at or below the root.
    """
    h = 0.5 * nu
    lower = 2.0 * np.exp((np.log(p) + special.gammaln(h + 1.0)) / h)
    z = np.where(p > 0.5, -special.ndtri(q), special.ndtri(p))
    c = 2.0 / (9.0 * nu)
    wh = nu * (1.0 - c + z * np.sqrt(c)) ** 3
    x0 = np.where(wh > lower, wh, lower)
    return x0, lower


def chi2_quantile(nu, p, *, upper=None, max_iter: int = 200):
    """Quantile of the chi-square distribution.

    Starts from a Wilson-Hilferty guess and refines with safeguarded Newton
    steps on the regularized incomplete gamma function, bisecting whenever a
    Newton step leaves the current bracket.

    Parameters
    ----------
    nu : float or array_like
        Degrees of freedom, positive.
    p : float or array_like
        Probabilities in [0, 1).
    upper : array_like, optional
        ``1 - p`` computed without cancellation; used for the upper tail.

    Returns
    -------
    ndarray or float
        ``x`` with ``P(nu/2, x/2) = p``.
    """
    nu_a = np.asarray(nu, dtype=float)
    p_a = np.asarray(p, dtype=float)
    if np.any(~(nu_a > 0)):
        raise ValueError("nu must be positive")
    if np.any(np.isnan(p_a)) or np.any(p_a < 0) or np.any(p_a > 1):
        raise ValueError("p must lie in [0, 1)")
    q_a = 1.0 - p_a if upper is None else np.asarray(upper, dtype=float)
    if np.any(q_a <= 0):
        raise ValueError("quantile at p = 1 is infinite")
    nu_b, p_b, q_b = np.broadcast_arrays(nu_a, p_a, q_a)
    nu_f = nu_b.astype(float).ravel()
    p_f = p_b.astype(float).ravel()
    q_f = q_b.astype(float).ravel()
    out = np.zeros_like(p_f)
    live = p_f > 0
    if np.any(live):
        out[live] = _solve(nu_f[live], p_f[live], q_f[live], max_iter)
    out = out.reshape(p_b.shape)
    return float(out) if out.ndim == 0 else out


def _solve(nu, p, q, max_iter):
    a = 0.5 * nu
    upper = p > 0.5
    x, lo = _initial_guess(nu, p, q)
    lo = np.where(np.isfinite(lo), lo * (1 - 1e-12), 0.0)
    hi = np.full_like(x, np.inf)
    out = x.copy()
    idx = np.arange(x.size)
    for _ in range(max_iter):
        xa, aa, na = x, a, nu
        r = np.empty_like(xa)
        up = upper[idx]
        # residual in the better-conditioned tail; increasing in x either way
        r[up] = q[idx][up] - special.gammaincc(aa[up], 0.5 * xa[up])
        r[~up] = special.gammainc(aa[~up], 0.5 * xa[~up]) - p[idx][~up]
        lo = np.where(r < 0, xa, lo)
        hi = np.where(r > 0, xa, hi)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            step = r / np.exp(_chi2_logpdf(xa, na))
        x_new = xa - step
        bad = ~np.isfinite(x_new) | (x_new <= lo) | (x_new >= hi)
        bisect = np.where(np.isfinite(hi), 0.5 * (lo + hi), 2.0 * xa + 1.0)
        x_new = np.where(bad, bisect, x_new)
        done = (np.abs(x_new - xa) <= 4e-16 * np.abs(xa)) | (r == 0) | (np.isfinite(hi) & (hi - lo <= 4e-16 * hi))
        x_new = np.where(r == 0, xa, x_new)
        out[idx] = x_new
        keep = ~done
        if not np.any(keep):
            break
        idx, x, lo, hi, a, nu = idx[keep], x_new[keep], lo[keep], hi[keep], a[keep], nu[keep]
    return out


def scaling_map(s, nu, upper=None):
    """``T(s) = chi2_quantile(nu, s) / nu`` componentwise, with ``T = 1`` for infinite ``nu``.

    ``s`` broadcasts against ``nu``; typically ``s`` has shape (n, 1) and
    ``nu`` shape (d,), giving an (n, d) array of co-monotone mixing values.
    ``upper`` optionally supplies ``1 - s`` to full relative precision.
    """
    s = np.asarray(s, dtype=float)
    nu = np.asarray(nu, dtype=float)
    q = 1.0 - s if upper is None else np.asarray(upper, dtype=float)
    if np.any((s <= 0) | (q <= 0)):
        raise ValueError("uniform argument must lie strictly inside (0, 1)")
    s_b, nu_b, q_b = np.broadcast_arrays(s, nu, q)
    out = np.ones(s_b.shape)
    fin = np.isfinite(nu_b)
    if np.any(fin):
        out[fin] = chi2_quantile(nu_b[fin], s_b[fin], upper=q_b[fin]) / nu_b[fin]
    return out


def mixing_vectors(s_eps: float, s_x: float, nu_eps, nu_x) -> MixingVectors:
    """Mixing vectors for a single pair of uniforms."""
    for s in (s_eps, s_x):
        if not 0.0 < s < 1.0:
            raise ValueError(f"uniform argument {s} outside (0, 1)")
    u = scaling_map(s_eps, np.atleast_1d(nu_eps))
    v = scaling_map(s_x, np.atleast_1d(nu_x))
    return MixingVectors(u=u, v=v, s_eps=float(s_eps), s_x=float(s_x))


def inv_mixing_moments(nu: float) -> tuple[float, float]:
    """Mean and variance of ``1/T`` with ``T ~ Gamma(nu/2, rate=nu/2)``.

    Returns ``nan`` for a moment that does not exist (``nu <= 2`` for the
    mean, ``nu <= 4`` for the variance). Infinite ``nu`` gives ``(1, 0)``.
    """
    nu = float(nu)
    if nu <= 0:
        raise ValueError("nu must be positive")
    if np.isinf(nu):
        return 1.0, 0.0
    mean = nu / (nu - 2.0) if nu > 2 else np.nan
    var = 2.0 * nu**2 / ((nu - 2.0) ** 2 * (nu - 4.0)) if nu > 4 else np.nan
    return mean, var
