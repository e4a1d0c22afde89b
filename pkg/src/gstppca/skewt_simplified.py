"""Skew-t fit with the factor skewness held on a grid and an adjusted intercept.

For each candidate ``delta_x`` the intercept is tied to the location of the
data through ``E[Y] = mu + nu_x / (nu_x - 2) delta_x W^T``. The loop
alternates that adjustment with an EM step of the centered model
``y - mu = x W^T + eps``, which only updates ``W`` and ``sigma2``.

With a single ``nu_x`` the factor coordinates are exchangeable and
symmetric, so ``(delta_x P, W P)`` and ``(delta_x, W)`` give the same law for
every signed permutation ``P``. Grid points are therefore grouped into
orbits; one member per orbit is fitted and the others are obtained by
permuting and flipping the columns of ``W``.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from .core_types import DataSet, ModelKind, ModelParams, ValidationError, validate
from .em_gst import EmConfig, _grid, accelerated_loop, initialize
from .posterior import NodeStatistics, node_statistics

log = logging.getLogger(__name__)

DEFAULT_MARGINAL_GRID = (-1.0, -0.5, -0.2, 0.0, 0.2, 0.5, 1.0)


@dataclass(frozen=True)
class SkewGridResult:
    delta_x: np.ndarray
    params: ModelParams
    loglik: float
    iterations: int = 0
    converged: bool = True


def product_grid(k: int, marginal=DEFAULT_MARGINAL_GRID) -> list[np.ndarray]:
    return [np.array(p, dtype=float) for p in itertools.product(marginal, repeat=k)]


# --------------------------------------------------------------------------
# centered M-step


@dataclass(frozen=True)
class CenteredIntegrals:
    """Integrals of the centered model; every node has a scalar noise mixing value."""

    A0: float
    A11: np.ndarray  # (k, k)
    A14: np.ndarray  # (d, k)
    A16: np.ndarray  # (d, k)
    A171819: np.ndarray  # (k, k)
    A20: float


def centered_integrals(stats: NodeStatistics, params: ModelParams) -> CenteredIntegrals:
    d = stats.d
    u = stats.nodes.u[:, 0]
    v = stats.nodes.v
    Om = stats.omega_sum
    Y1 = stats.first[:, :d]
    Y2 = stats.second[:, :d, :d]
    W, s2, dx = params.W, params.sigma2, params.delta_x
    k = W.shape[1]
    M = s2 * v[:, :, None] * np.eye(k) + u[:, None, None] * (W.T @ W)
    Minv = np.linalg.inv(M)
    WY2W = np.einsum("ia,gij,jb->gab", W, Y2, W)
    Y1W = Y1 @ W  # (G, k)
    cross = np.einsum("ga,b->gab", Y1W, dx)
    inner = (
        (u**2)[:, None, None] * WY2W
        + (u * s2)[:, None, None] * (cross + np.swapaxes(cross, 1, 2))
        + (s2**2 * Om)[:, None, None] * np.outer(dx, dx)
    )
    return CenteredIntegrals(
        A0=float(Om.sum()),
        A11=np.einsum("g,gab->ab", u * Om, Minv),
        A14=np.einsum("g,gij,ja,gab->ib", u**2, Y2, W, Minv),
        A16=np.einsum("g,gi,a,gab->ib", u, Y1, dx, Minv),
        A171819=np.einsum("g,gab,gbc,gcd->ad", u, Minv, inner, Minv),
        A20=float(np.einsum("g,gii->", u, Y2)),
    )


def centered_update(A: CenteredIntegrals, params: ModelParams):
    """Closed-form ``(W*, sigma2*)`` from the centered integrals."""
    s2 = params.sigma2
    d = params.d
    lhs = A.A14 + s2 * A.A16
    R = s2 * A.A11 + A.A171819
    try:
        W_star = np.linalg.solve(R.T, lhs.T).T
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular k x k system in the centered M-step") from exc
    sigma2 = (A.A20 - 2.0 * np.trace(W_star.T @ lhs) + np.trace(R @ W_star.T @ W_star)) / (d * A.A0)
    return W_star, float(max(sigma2, 1e-300))


def _centered_params(params: ModelParams) -> ModelParams:
    return params.replace(mu=np.zeros(params.d), delta_eps=np.zeros(params.d))


def centered_m_step(data_centered: DataSet, params: ModelParams, grid):
    """One EM update of ``(W, sigma2)`` for data already shifted by the intercept."""
    if not data_centered.complete:
        raise ValidationError("the centered model needs complete data")
    cp = _centered_params(params)
    stats = node_statistics(data_centered, cp, _grid(grid))
    return centered_update(centered_integrals(stats, cp), cp)


# --------------------------------------------------------------------------
# intercept-adjusted loop for one grid point


def _location(Y, robust: bool):
    if robust:
        from .standardize import huber_location_scale

        return np.array([huber_location_scale(col)[0] for col in Y.T])
    return Y.mean(axis=0)


def _scalar(nu, name):
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    if not np.all(nu == nu[0]):
        raise ValidationError(f"{name} must be a single value")
    return float(nu[0])


def _align_to_skew(params: ModelParams, Y) -> ModelParams:
    """Rotate the starting loadings so that ``delta_x W^T`` points along the sample mean-minus-median.

    Rotations leave ``W W^T`` unchanged but a skewed factor is only weakly
    identified along them, so EM started from an arbitrary rotation crawls.
    """
    dx = params.delta_x
    W = params.W
    a = np.linalg.lstsq(W, Y.mean(axis=0) - np.median(Y, axis=0), rcond=None)[0]
    if not (np.linalg.norm(dx) > 0 and np.linalg.norm(a) > 0):
        return params
    src, dst = dx / np.linalg.norm(dx), a / np.linalg.norm(a)
    diff = src - dst
    if np.linalg.norm(diff) < 1e-12:
        return params
    h = diff / np.linalg.norm(diff)
    R = np.eye(dx.size) - 2.0 * np.outer(h, h)  # reflection taking src to dst
    return params.replace(W=W @ R)


def fit_skew_point(
    data: DataSet,
    init: ModelParams,
    delta_x,
    config: EmConfig | None = None,
    *,
    grid=None,
    robust_location: bool = False,
) -> SkewGridResult:
    """Intercept-adjusted EM for one fixed ``delta_x``."""
    config = config or EmConfig()
    grid = _grid(grid if grid is not None else config.grid_n)
    nu_x = _scalar(init.nu_x, "nu_x")
    if not nu_x > 2:
        raise ValidationError("nu_x must exceed 2 for the intercept adjustment")
    c = nu_x / (nu_x - 2.0) if np.isfinite(nu_x) else 1.0
    ybar = _location(data.Y, robust_location)
    delta_x = np.asarray(delta_x, dtype=float)

    def evaluate(p):
        mu = ybar - c * delta_x @ p.W.T
        full = validate(p.replace(mu=mu, delta_eps=np.zeros(p.d), delta_x=delta_x), ModelKind.SkewTGStSimplified)
        centered = DataSet(data.Y - mu)
        stats = node_statistics(centered, _centered_params(full), grid)
        return full, stats

    def update(p, st):
        W, s2 = centered_update(centered_integrals(st, _centered_params(p)), p)
        return p.replace(W=W, sigma2=s2)

    start = _align_to_skew(init.replace(delta_x=delta_x, delta_eps=np.zeros(init.d)), data.Y)
    params, _, trace, it, converged = accelerated_loop(start, lambda p: evaluate(p)[1], update, config)
    params = evaluate(params)[0]
    return SkewGridResult(delta_x, params, trace[-1], it, converged)


# --------------------------------------------------------------------------
# grid search


def _canonical(delta):
    """Orbit representative: absolute values in decreasing order."""
    return tuple(sorted(np.abs(delta), reverse=True))


def _to_member(result: SkewGridResult, member: np.ndarray) -> SkewGridResult:
    """Move a fitted orbit representative onto another orbit member."""
    rep = result.delta_x
    W = result.params.W
    used = np.zeros(rep.size, dtype=bool)
    cols = np.empty_like(W)
    for j, val in enumerate(member):
        src = next(i for i in range(rep.size) if not used[i] and np.isclose(abs(rep[i]), abs(val)))
        used[src] = True
        sign = -1.0 if val < 0 else 1.0
        cols[:, j] = sign * W[:, src]
    params = result.params.replace(W=cols, delta_x=np.array(member, dtype=float))
    return SkewGridResult(np.array(member, dtype=float), params, result.loglik, result.iterations, result.converged)


def fit_skew_t_grid(
    data: DataSet,
    k: int,
    nu_eps: float,
    nu_x: float,
    delta_grid=None,
    config: EmConfig | None = None,
    *,
    grid=None,
    robust_location: bool = False,
):
    """Fit every grid point and select the largest log-likelihood.

    Returns
    -------
    best : SkewGridResult
    results : list of SkewGridResult
        One entry per grid point, in grid order.

    Notes
    -----
    Orbit members share one likelihood exactly. Within the winning orbit the
    reported point is the canonical member (non-negative entries in
    decreasing order); ties between different orbits go to the
    lexicographically smallest point.
    """
    if not data.complete:
        raise ValidationError("the skew grid fit needs complete data")
    nu_eps = _scalar(nu_eps, "nu_eps")
    nu_x = _scalar(nu_x, "nu_x")
    if not nu_x > 2:
        raise ValidationError("nu_x must exceed 2")
    points = product_grid(k) if delta_grid is None else [np.atleast_1d(np.asarray(p, dtype=float)) for p in delta_grid]
    if not points:
        raise ValidationError("empty delta grid")
    if any(p.size != k for p in points):
        raise ValidationError("grid points must have k entries")
    config = config or EmConfig()
    grid = _grid(grid if grid is not None else config.grid_n)
    init = initialize(data, k, nu_eps, nu_x)

    fitted: dict[tuple, SkewGridResult] = {}
    results = []
    for p in points:
        key = _canonical(p)
        if key not in fitted:
            fitted[key] = fit_skew_point(data, init, np.array(key), config, grid=grid, robust_location=robust_location)
            log.debug("delta_x orbit %s: loglik %.6f", key, fitted[key].loglik)
        results.append(_to_member(fitted[key], p))

    best_ll = max(r.loglik for r in results)
    winners = [r for r in results if r.loglik == best_ll]
    canon = [r for r in winners if tuple(r.delta_x) == _canonical(r.delta_x)]
    pool = canon or winners
    best = min(pool, key=lambda r: tuple(r.delta_x))
    return best, results
