"""EM estimation for the generalized skew-t PPCA family under missing data.

The E-step integrates over the unit square of the two mixing uniforms with a
tensor Gauss-Legendre rule. Conditional on a node the model is linear
Gaussian, so the expected complete-data log-likelihood is quadratic in
``(mu, delta_eps, W)`` for fixed ``sigma2``. The M-step therefore solves, per
output coordinate ``i``, a weighted least-squares problem of ``y_i`` on the
features ``(1, 1/u_i, x)`` with weight ``u_i``, which is the exact joint
maximizer. ``delta_x`` and ``sigma2`` then follow in closed form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from .core_types import DataSet, FitResult, ModelKind, ModelParams, validate
from .posterior import LOG_2PI, NodeStatistics, node_statistics, row_loglik
from .quadrature import QuadratureGrid, build_grid

log = logging.getLogger(__name__)


class NonMonotoneError(RuntimeError):
    """Raised when an EM step lowers the log-likelihood beyond tolerance."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = np.asarray(trace)


@dataclass(frozen=True)
class EmConfig:
    grid_n: int = 32
    max_iter: int = 500
    rel_tol: float = 1e-6
    inner_max_iter: int = 10
    inner_tol: float = 1e-10
    monotone_slack: float = 1e-6
    accelerate: bool = True

    def __post_init__(self):
        for f in fields(self):
            if f.name != "accelerate" and not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")


def _grid(grid) -> QuadratureGrid:
    """Grids pass through; an integer selects the mixing rule with that many nodes."""
    if isinstance(grid, QuadratureGrid):
        return grid
    return build_grid(int(grid), "mixing")


# --------------------------------------------------------------------------
# free parameters per family member

_SKEW_EPS_KINDS = {ModelKind.GStGeneral}
_SKEW_X_KINDS = {ModelKind.GStGeneral, ModelKind.SkewTGStSimplified}


def free_parameters(kind: ModelKind, fixed=()) -> dict:
    kind = ModelKind.parse(kind)
    if kind is ModelKind.StudentTPPCA:
        raise ValueError("StudentTPPCA shares one scale between factors and noise; use fit_student_t_ppca")
    free = {
        "mu": True,
        "delta_eps": kind in _SKEW_EPS_KINDS,
        "delta_x": kind in _SKEW_X_KINDS,
        "W": True,
        "sigma2": True,
    }
    for name in fixed:
        if name not in free:
            raise ValueError(f"unknown parameter {name!r}")
        free[name] = False
    return free


# --------------------------------------------------------------------------
# quadratic form of the expected complete-data log-likelihood


@dataclass(frozen=True)
class _Normal:
    """Per-coordinate normal equations; feature order ``(1, 1/u_i, x_1..x_k)``."""

    G: np.ndarray  # (d, k+2, k+2)
    h: np.ndarray  # (d, k+2)
    ss: np.ndarray  # (d,)


def _normal_equations(stats: NodeStatistics) -> _Normal:
    d, k = stats.d, stats.k
    u = stats.nodes.u  # (G, d)
    Om = stats.omega_sum
    Fy, Fx = stats.first[:, :d], stats.first[:, d:]
    Sxx = stats.second[:, d:, d:]
    Sxy = stats.second[:, d:, :d]  # (G, k, d)
    Syy = np.diagonal(stats.second[:, :d, :d], axis1=1, axis2=2)  # (G, d)

    G = np.zeros((d, k + 2, k + 2))
    G[:, 0, 0] = u.T @ Om
    G[:, 0, 1] = G[:, 1, 0] = Om.sum()
    G[:, 1, 1] = (1.0 / u).T @ Om
    G[:, 0, 2:] = u.T @ Fx
    G[:, 1, 2:] = np.broadcast_to(Fx.sum(axis=0), (d, k))
    G[:, 2:, 0] = G[:, 0, 2:]
    G[:, 2:, 1] = G[:, 1, 2:]
    G[:, 2:, 2:] = np.einsum("gi,gab->iab", u, Sxx)

    h = np.zeros((d, k + 2))
    h[:, 0] = np.sum(u * Fy, axis=0)
    h[:, 1] = Fy.sum(axis=0)
    h[:, 2:] = np.einsum("gi,gai->ia", u, Sxy)
    ss = np.sum(u * Syy, axis=0)
    return _Normal(G, h, ss)


def _coefficients(p: ModelParams) -> np.ndarray:
    return np.column_stack([p.mu, p.delta_eps, p.W])  # (d, k+2)


def _residual_ss(ne: _Normal, beta: np.ndarray) -> np.ndarray:
    return ne.ss - 2.0 * np.einsum("ia,ia->i", beta, ne.h) + np.einsum("ia,iab,ib->i", beta, ne.G, beta)


def _x_quadratic(stats: NodeStatistics, delta_x: np.ndarray) -> float:
    """``sum E[(x - delta_x / v) D_x (x - delta_x / v)^T]`` over rows."""
    d = stats.d
    v = stats.nodes.v
    Sxx_diag = np.diagonal(stats.second[:, d:, d:], axis1=1, axis2=2)
    Fx = stats.first[:, d:]
    term = np.sum(v * Sxx_diag) - 2.0 * np.sum(Fx @ delta_x) + np.sum(stats.omega_sum[:, None] * delta_x**2 / v)
    return float(term)


def _q_constant(stats: NodeStatistics) -> float:
    n = stats.omega_sum.sum()
    lu = np.log(stats.nodes.u).sum(axis=1)
    lv = np.log(stats.nodes.v).sum(axis=1)
    return float(-0.5 * n * (stats.d + stats.k) * LOG_2PI + 0.5 * stats.omega_sum @ (lu + lv))


def q_from_statistics(stats: NodeStatistics, params_star: ModelParams) -> float:
    """Expected complete-data log-likelihood given aggregated E-step statistics.

    The log-densities of the mixing variables are omitted since they do not
    depend on the estimated parameters.
    """
    ne = _normal_equations(stats)
    rss = _residual_ss(ne, _coefficients(params_star)).sum()
    n = stats.omega_sum.sum()
    s2 = params_star.sigma2
    return (
        _q_constant(stats)
        - 0.5 * n * stats.d * np.log(s2)
        - 0.5 * rss / s2
        - 0.5 * _x_quadratic(stats, params_star.delta_x)
    )


def e_step_q(data: DataSet, params: ModelParams, params_star: ModelParams, grid) -> float:
    """``Q(params, params_star) = sum_t I1(y_t) / I2(y_t)``."""
    stats = node_statistics(data, params, _grid(grid))
    return q_from_statistics(stats, params_star)


def row_q_terms(data: DataSet, params: ModelParams, params_star: ModelParams, grid) -> np.ndarray:
    """Per-row ratios ``I1(y_t) / I2(y_t)`` (one E-step per row)."""
    grid = _grid(grid)
    out = np.empty(data.N)
    for t in range(data.N):
        row = DataSet(data.Y[t : t + 1], data.mask[t : t + 1])
        out[t] = q_from_statistics(node_statistics(row, params, grid), params_star)
    return out


# --------------------------------------------------------------------------
# M-step


def m_step_from_statistics(stats: NodeStatistics, params: ModelParams, free: dict) -> ModelParams:
    """Exact maximizer of ``Q`` over the free parameters."""
    d, k = stats.d, stats.k
    ne = _normal_equations(stats)
    beta = _coefficients(params).copy()
    active = np.array([free["mu"], free["delta_eps"]] + [free["W"]] * k)
    if np.any(active):
        A = np.flatnonzero(active)
        F = np.flatnonzero(~active)
        for i in range(d):
            GA = ne.G[i][np.ix_(A, A)]
            rhs = ne.h[i][A] - ne.G[i][np.ix_(A, F)] @ beta[i, F]
            try:
                beta[i, A] = np.linalg.solve(GA, rhs)
            except np.linalg.LinAlgError:
                beta[i, A] = np.linalg.lstsq(GA, rhs, rcond=None)[0]
    delta_x = params.delta_x
    if free["delta_x"]:
        Fx = stats.first[:, d:].sum(axis=0)
        prec = stats.omega_sum @ (1.0 / stats.nodes.v)
        delta_x = Fx / prec
    sigma2 = params.sigma2
    if free["sigma2"]:
        rss = _residual_ss(ne, beta).sum()
        sigma2 = max(rss / (stats.omega_sum.sum() * d), 1e-300)
    return params.replace(mu=beta[:, 0], delta_eps=beta[:, 1], W=beta[:, 2:], delta_x=delta_x, sigma2=sigma2)


def m_step(
    data: DataSet,
    params: ModelParams,
    grid,
    config: EmConfig | None = None,
    kind: ModelKind | str = ModelKind.GStGeneral,
    fixed=(),
) -> ModelParams:
    """One M-step: the maximizer of ``Q(params, .)`` over the free parameters of ``kind``."""
    stats = node_statistics(data, params, _grid(grid))
    return m_step_from_statistics(stats, params, free_parameters(kind, fixed))


def log_likelihood(data: DataSet, params: ModelParams, grid) -> float:
    return float(np.sum(row_loglik(data, params, _grid(grid))))


# --------------------------------------------------------------------------
# initialization and outer loop


def initialize(data: DataSet, k: int, nu_eps=np.inf, nu_x=np.inf) -> ModelParams:
    """Median location and SVD of the median-imputed centered data; zero skew."""
    Y = np.array(data.Y, dtype=float)
    med = np.nanmedian(Y, axis=0)
    Y = np.where(data.mask, Y, med)
    Yc = Y - med
    n, d = Yc.shape
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    _, s, Vt = np.linalg.svd(Yc, full_matrices=False)
    lam = s**2 / n
    sigma2 = float(np.mean(lam[k:])) if k < d else 0.1 * float(np.mean(lam))
    sigma2 = max(sigma2, 1e-8 * max(float(lam[0]), 1e-300), 1e-12)
    scale = np.sqrt(np.maximum(lam[:k] - sigma2, 1e-3 * lam[:k] + 1e-12))
    W = Vt[:k].T * scale
    return ModelParams.create(W, med, sigma2, nu_eps=nu_eps, nu_x=nu_x)


def _enforce(params: ModelParams, kind: ModelKind) -> ModelParams:
    changes = {}
    if kind not in _SKEW_EPS_KINDS:
        changes["delta_eps"] = np.zeros(params.d)
    if kind not in _SKEW_X_KINDS:
        changes["delta_x"] = np.zeros(params.k)
    return params.replace(**changes) if changes else params


_VEC_FIELDS = ("W", "mu", "delta_eps", "delta_x")


def _to_vector(p: ModelParams) -> np.ndarray:
    parts = [getattr(p, f).ravel() for f in _VEC_FIELDS]
    return np.concatenate(parts + [[np.log(p.sigma2)]])


def _from_vector(x: np.ndarray, like: ModelParams) -> ModelParams:
    changes, pos = {}, 0
    for f in _VEC_FIELDS:
        ref = getattr(like, f)
        changes[f] = x[pos : pos + ref.size].reshape(ref.shape)
        pos += ref.size
    changes["sigma2"] = float(np.exp(x[pos]))
    return like.replace(**changes)


def _squarem_point(p0: ModelParams, p1: ModelParams, p2: ModelParams) -> ModelParams | None:
    """Squared extrapolation from two successive EM steps (steplength ``-|r| / |v|``)."""
    x0, x1, x2 = _to_vector(p0), _to_vector(p1), _to_vector(p2)
    r = x1 - x0
    v = x2 - x1 - r
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return None
    alpha = -np.clip(np.linalg.norm(r) / nv, 1.0, 64.0)
    if alpha == -1.0:
        return None
    return _from_vector(x0 - 2.0 * alpha * r + alpha**2 * v, p0)


def accelerated_loop(params, evaluate, update, config: EmConfig, on_step=None):
    """Fixed-point iteration ``params -> update(params, evaluate(params))`` with squared extrapolation.

    Each cycle takes two plain steps and then tries the extrapolated point,
    keeping it only if its log-likelihood is at least that of the second
    plain step. ``evaluate`` returns an object with a ``loglik`` attribute.
    ``on_step(prev, new, trace)`` may raise to abort.

    Returns
    -------
    params, stats, trace, iterations, converged
    """
    stats = evaluate(params)
    trace = [stats.loglik]
    steps = 0

    def record(ll):
        if on_step is not None:
            on_step(trace[-1], ll, trace)
        trace.append(ll)

    def small(prev, ll):
        return abs(ll - prev) <= config.rel_tol * abs(prev)

    while steps < config.max_iter:
        p1 = update(params, stats)
        s1 = evaluate(p1)
        steps += 1
        record(s1.loglik)
        done = small(stats.loglik, s1.loglik)
        if done or not config.accelerate or steps >= config.max_iter:
            params, stats = p1, s1
            if done:
                return params, stats, trace, steps, True
            continue
        p2 = update(p1, s1)
        s2 = evaluate(p2)
        steps += 1
        record(s2.loglik)
        if small(s1.loglik, s2.loglik):
            return p2, s2, trace, steps, True
        trial = _squarem_point(params, p1, p2)
        params, stats = p2, s2
        if trial is not None:
            try:
                st = evaluate(trial)
            except (np.linalg.LinAlgError, ArithmeticError, FloatingPointError, ValueError):
                st = None
            if st is not None and np.isfinite(st.loglik) and st.loglik >= s2.loglik:
                record(st.loglik)
                params, stats = trial, st
    return params, stats, trace, steps, False


def fit(
    data: DataSet,
    kind: ModelKind | str,
    init: ModelParams,
    config: EmConfig | None = None,
    *,
    fixed=(),
    grid=None,
) -> FitResult:
    """Alternate E- and M-steps until the relative log-likelihood change drops below ``rel_tol``."""
    from .covariance import model_covariance

    kind = ModelKind.parse(kind)
    config = config or EmConfig()
    grid = _grid(grid if grid is not None else config.grid_n)
    params = validate(_enforce(init, kind), kind)
    free = free_parameters(kind, fixed)

    def evaluate(p):
        return node_statistics(data, validate(p, kind), grid)

    def update(p, st):
        return _enforce(m_step_from_statistics(st, p, free), kind)

    def check(prev, ll, trace):
        if ll < prev - config.monotone_slack * abs(prev):
            raise NonMonotoneError(f"log-likelihood fell from {prev:.10g} to {ll:.10g}", trace + [ll])

    params, _, trace, it, converged = accelerated_loop(params, evaluate, update, config, check)
    log.debug("fit %s: %d iterations, loglik %.6f", kind.value, it, trace[-1])
    report = model_covariance(params, kind)
    return FitResult(
        params=params,
        kind=kind,
        loglik_trace=np.asarray(trace),
        iterations=it,
        converged=converged,
        cov=report.cov,
        eigvals=report.eigvals,
        eigvecs=report.eigvecs,
        cov_defined=report.defined["cov"],
    )


# --------------------------------------------------------------------------
# named sufficient-statistic integrals


@dataclass(frozen=True)
class IntegralSet:
    """Row-normalized quadratures that assemble the stationarity system.

    Each entry is ``sum_t`` of a unit-square integral against the posterior
    node weights of row ``t``. ``W``-dependent entries use the current ``W``
    through ``M = sigma2 D_x + W^T D_eps W``; entries marked ``*`` in their
    definition also carry the candidate ``W*``.
    """

    A0: float
    A1: np.ndarray
    A2: np.ndarray
    A3: np.ndarray
    A4: np.ndarray
    A5: np.ndarray
    A6: np.ndarray
    A7: np.ndarray
    A8: np.ndarray
    A9: np.ndarray
    A10: np.ndarray
    A11: np.ndarray
    A12: np.ndarray
    A13: np.ndarray
    A14: np.ndarray
    A15: np.ndarray
    A16: np.ndarray
    A17: np.ndarray
    A18_1: np.ndarray
    A18_2: np.ndarray
    A19: np.ndarray
    A20: float
    A21: float

    @property
    def A171819(self) -> np.ndarray:
        return self.A17 - self.A18_1 - self.A18_2 + self.A19


def integrals_from_statistics(stats: NodeStatistics, params: ModelParams, params_star: ModelParams) -> IntegralSet:
    d = stats.d
    u, v = stats.nodes.u, stats.nodes.v
    Om = stats.omega_sum
    EY = stats.first[:, :d]
    EYY = stats.second[:, :d, :d]
    W, Ws, s2 = params.W, params_star.W, params.sigma2
    mus = params_star.mu

    DeW = u[:, :, None] * W  # (G, d, k)
    DeWs = u[:, :, None] * Ws
    M = s2 * _batched_diag(v) + np.einsum("ia,gib->gab", W, DeW)
    Minv = np.linalg.inv(M)
    DeWMi = DeW @ Minv  # D_eps W M^-1
    DeWsMi = DeWs @ Minv  # D_eps W* M^-1
    b = (params.mu * u) @ W + params.delta_eps @ W - s2 * params.delta_x  # (G, k)
    bMi = np.einsum("ga,gab->gb", b, Minv)
    P = DeWsMi @ np.swapaxes(DeW, 1, 2)  # D_eps W* M^-1 W^T D_eps
    Ps = DeWMi @ np.swapaxes(DeWs, 1, 2)  # D_eps W M^-1 W*^T D_eps
    EYDW = np.einsum("gi,gia->ga", EY, DeWMi)  # E[Y] D_eps W M^-1
    DWsMib = np.einsum("gia,ga->gi", DeWsMi, b)  # D_eps W* M^-1 b^T
    uc = u * (EY - Om[:, None] * mus)

    return IntegralSet(
        A0=float(Om.sum()),
        A1=np.diag(Om @ u),
        A2=np.diag(Om @ (1.0 / u)),
        A3=np.diag(Om @ (1.0 / v)),
        A4=np.einsum("g,gab->ab", Om, Minv),
        A5=EY.sum(axis=0),
        A6=np.sum(EY * u, axis=0),
        A7=np.einsum("gi,gia->a", EY, DeWsMi),
        A8=EYDW.sum(axis=0),
        A9=np.einsum("gi,gij->j", EY, P),
        A10=np.einsum("gi,gij->j", EY, Ps),
        A11=np.einsum("g,gia->ia", Om, DeWMi),
        A12=np.einsum("g,gia->ia", Om, DeWsMi),
        A13=np.einsum("g,gij->ij", Om, Ps),
        A14=np.einsum("gi,gij,gja->ia", u, EYY, DeWMi),
        A15=np.einsum("gi,ga->ia", u * mus, EYDW),
        A16=np.einsum("gi,ga->ia", uc, bMi),
        A17=np.einsum("gij,gjl,gla->ia", P, EYY, DeWMi),
        A18_1=np.einsum("gij,gj,ga->ia", P, EY, bMi),
        A18_2=np.einsum("gi,ga->ia", DWsMib, EYDW),
        A19=np.einsum("g,gi,ga->ia", Om, DWsMib, bMi),
        A20=float(np.einsum("gii,gi->", EYY, u)),
        A21=float(np.einsum("gij,gji->", EYY, Ps)),
    )


def _batched_diag(v):
    out = np.zeros(v.shape + v.shape[-1:])
    idx = np.arange(v.shape[-1])
    out[:, idx, idx] = v
    return out


def integral_set(data: DataSet, params: ModelParams, params_star: ModelParams, grid) -> IntegralSet:
    """All named integrals at ``params`` with candidate ``params_star``."""
    return integrals_from_statistics(node_statistics(data, params, _grid(grid)), params, params_star)


def stationarity_residuals(A: IntegralSet, params: ModelParams, params_star: ModelParams) -> dict:
    """Partial derivatives of ``Q`` in ``params_star`` (up to positive factors).

    ``W`` maps to the ``d x k`` gradient block ``f(W*)``; ``sigma2`` maps to
    the gap between ``N d sigma2*`` and its closed form.
    """
    s2 = params.sigma2
    mu, ps = params.mu, params_star
    shift = params.delta_eps @ params.W - s2 * params.delta_x  # (k,)
    Ex = A.A8 - mu @ A.A11 - shift @ A.A4  # sum of posterior factor means
    r_mu = A.A6 - ps.mu @ A.A1 - ps.delta_eps * A.A0 - A.A10 + mu @ A.A13 + shift @ A.A12.T
    r_de = A.A5 - ps.mu * A.A0 - ps.delta_eps @ A.A2 - Ex @ ps.W.T
    r_dx = Ex - ps.delta_x @ A.A3
    D = A.A14 - A.A15 - A.A16
    E_xx = s2 * A.A12 + A.A171819  # sum D_eps W* E[x^T x]
    f = D - np.outer(ps.delta_eps, Ex) - E_xx
    return {"mu": r_mu, "delta_eps": r_de, "delta_x": r_dx, "W": f, "sigma2": sigma2_closed_form(A, params, params_star) - ps.sigma2}


def sigma2_closed_form(A: IntegralSet, params: ModelParams, params_star: ModelParams) -> float:
    """``sigma2*`` solving its own stationarity equation given the other starred values."""
    s2 = params.sigma2
    ps = params_star
    shift = params.delta_eps @ params.W - s2 * params.delta_x
    Ex = A.A8 - params.mu @ A.A11 - shift @ A.A4
    m, de, Ws = ps.mu, ps.delta_eps, ps.W
    d = Ws.shape[0]
    total = (
        A.A20
        - 2.0 * A.A6 @ m
        - 2.0 * A.A5 @ de
        + m @ A.A1 @ m
        + 2.0 * A.A0 * m @ de
        + de @ A.A2 @ de
        - 2.0 * np.trace(Ws.T @ (A.A14 - A.A15 - A.A16))
        + 2.0 * de @ Ws @ Ex
        + np.trace(Ws.T @ (s2 * A.A12 + A.A171819))
    )
    return float(total / (A.A0 * d))
