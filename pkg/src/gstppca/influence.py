"""Influence-function diagnostics and the simulation harness for estimator accuracy.

Scores and Hessians of the per-row marginal log-density are taken by
central finite differences on the quadrature log-likelihood. Parameters are
flattened as ``(sigma2, W column-major, mu, delta_eps, delta_x)`` restricted
to the requested names.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.linalg import orthogonal_procrustes

from .core_types import DataSet, ModelKind, ModelParams, collapse_kind
from .em_gst import EmConfig, _grid, fit, initialize
from .posterior import row_loglik
from .simulate import simulate

log = logging.getLogger(__name__)

DEFAULT_NAMES = ("sigma2", "W")


@dataclass(frozen=True)
class InfluenceReport:
    labels: tuple
    IF: np.ndarray  # (N, p)
    asy_var: np.ndarray
    gross_error: np.ndarray
    local_shift: np.ndarray
    hessian: np.ndarray
    hessian_spd: bool = True


# --------------------------------------------------------------------------
# parameter flattening


def parameter_labels(params: ModelParams, names=DEFAULT_NAMES) -> tuple:
    d, k = params.d, params.k
    out = []
    for name in names:
        if name == "sigma2":
            out.append("sigma2")
        elif name == "W":
            out += [f"W[{i},{j}]" for j in range(k) for i in range(d)]
        elif name in ("mu", "delta_eps"):
            out += [f"{name}[{i}]" for i in range(d)]
        elif name == "delta_x":
            out += [f"delta_x[{j}]" for j in range(k)]
        else:
            raise ValueError(f"unknown parameter {name!r}")
    return tuple(out)


def flatten(params: ModelParams, names=DEFAULT_NAMES) -> np.ndarray:
    parts = []
    for name in names:
        val = getattr(params, name)
        parts.append(np.atleast_1d(val.ravel(order="F") if name == "W" else val))
    return np.concatenate(parts).astype(float)


def unflatten(theta, params: ModelParams, names=DEFAULT_NAMES) -> ModelParams:
    d, k = params.d, params.k
    sizes = {"sigma2": 1, "W": d * k, "mu": d, "delta_eps": d, "delta_x": k}
    changes, pos = {}, 0
    for name in names:
        chunk = theta[pos : pos + sizes[name]]
        pos += sizes[name]
        if name == "sigma2":
            changes[name] = float(chunk[0])
        elif name == "W":
            changes[name] = chunk.reshape((d, k), order="F")
        else:
            changes[name] = chunk
    return params.replace(**changes)


# --------------------------------------------------------------------------
# per-row log-densities by model kind


def row_loglik_kind(Y: np.ndarray, params: ModelParams, kind, grid=32) -> np.ndarray:
    """Marginal log-density of complete rows under ``kind``."""
    kind = ModelKind.parse(kind)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if kind is ModelKind.GaussianPPCA:
        C = params.W @ params.W.T + params.sigma2 * np.eye(params.d)
        return stats.multivariate_normal(params.mu, C).logpdf(Y).reshape(-1)
    if kind is ModelKind.StudentTPPCA:
        C = params.W @ params.W.T + params.sigma2 * np.eye(params.d)
        nu = float(params.nu_eps[0])
        return stats.multivariate_t(params.mu, C, df=nu).logpdf(Y).reshape(-1)
    return row_loglik(DataSet(Y), params, _grid(grid))


def _steps(theta):
    return 1e-5 * (1.0 + np.abs(theta))


def score_matrix(Y, params: ModelParams, kind, grid=32, names=DEFAULT_NAMES, h=None) -> np.ndarray:
    """Per-row scores, shape (N, p), by central differences."""
    theta = flatten(params, names)
    h = _steps(theta) if h is None else np.broadcast_to(np.asarray(h, dtype=float), theta.shape)
    out = np.empty((np.atleast_2d(Y).shape[0], theta.size))
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h[j]
        hi = row_loglik_kind(Y, unflatten(theta + e, params, names), kind, grid)
        lo = row_loglik_kind(Y, unflatten(theta - e, params, names), kind, grid)
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            raise ArithmeticError(f"non-finite likelihood when perturbing parameter {j}")
        out[:, j] = (hi - lo) / (2.0 * h[j])
    return out


def score(y, params: ModelParams, grid=32, kind=None, names=DEFAULT_NAMES, h=None) -> np.ndarray:
    """Gradient of the log-density of one complete row."""
    kind = collapse_kind(params) if kind is None else kind
    return score_matrix(np.atleast_2d(y), params, kind, grid, names, h)[0]


def expected_hessian(sample: DataSet, params: ModelParams, grid=32, kind=None, names=DEFAULT_NAMES):
    """Average finite-difference Hessian of the per-row log-density.

    Returns
    -------
    H : ndarray (p, p)
        Symmetrized.
    spd : bool
        Whether ``-H`` is positive definite; a diagnostic only.
    """
    if not sample.complete:
        raise ValueError("expected_hessian needs complete rows")
    kind = collapse_kind(params) if kind is None else ModelKind.parse(kind)
    Y = sample.Y
    theta = flatten(params, names)
    h = _steps(theta)
    p = theta.size

    def f(t):
        return row_loglik_kind(Y, unflatten(t, params, names), kind, grid).mean()

    f0 = f(theta)
    H = np.empty((p, p))
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h[i]
        H[i, i] = (f(theta + ei) - 2.0 * f0 + f(theta - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(p)
            ej[j] = h[j]
            val = f(theta + ei + ej) - f(theta + ei - ej) - f(theta - ei + ej) + f(theta - ei - ej)
            H[i, j] = H[j, i] = val / (4.0 * h[i] * h[j])
    H = 0.5 * (H + H.T)
    try:
        np.linalg.cholesky(-H)
        spd = True
    except np.linalg.LinAlgError:
        spd = False
    return H, spd


def rotation_directions(params: ModelParams, names=DEFAULT_NAMES) -> np.ndarray:
    """Flattened tangents ``W -> W A`` (``A`` antisymmetric) along which the likelihood is flat.

    Empty unless the factor law is spherical (one ``nu_x``, zero ``delta_x``)
    and ``W`` is among ``names``.
    """
    p = flatten(params, names).size
    k = params.k
    spherical = np.all(params.nu_x == params.nu_x[0]) and not np.any(params.delta_x)
    if "W" not in names or k < 2 or not spherical:
        return np.zeros((p, 0))
    offset = 0
    for name in names:
        if name == "W":
            break
        offset += {"sigma2": 1, "mu": params.d, "delta_eps": params.d, "delta_x": k}[name]
    out = []
    for a in range(k):
        for b in range(a + 1, k):
            A = np.zeros((k, k))
            A[a, b], A[b, a] = 1.0, -1.0
            t = np.zeros(p)
            t[offset : offset + params.d * k] = (params.W @ A).ravel(order="F")
            out.append(t)
    return np.array(out).T


def _inverse(H, null=None, rcond=1e-7):
    """Pseudo-inverse of ``H`` on the complement of the columns of ``null``."""
    if not np.all(np.isfinite(H)):
        raise np.linalg.LinAlgError("singular Hessian")
    if null is None or null.shape[1] == 0:
        return np.linalg.pinv(H, rcond=rcond, hermitian=True)
    Q, _ = np.linalg.qr(null, mode="complete")
    Q = Q[:, null.shape[1] :]
    return Q @ np.linalg.pinv(Q.T @ H @ Q, rcond=rcond, hermitian=True) @ Q.T


def influence_function(y, params: ModelParams, H, grid=32, kind=None, names=DEFAULT_NAMES) -> np.ndarray:
    """``IF(y) = -score(y) H^{-1}``; accepts one row or a matrix of rows.

    Flat rotation directions of ``W`` are removed before inverting.
    """
    kind = collapse_kind(params) if kind is None else kind
    y = np.asarray(y, dtype=float)
    S = score_matrix(np.atleast_2d(y), params, kind, grid, names)
    IF = -S @ _inverse(H, rotation_directions(params, names))
    return IF[0] if y.ndim == 1 else IF


def sensitivity_measures(sample, IFs):
    """Asymptotic variance, gross-error and local-shift sensitivity per column.

    The local shift uses pairwise L1 distances between rows; coincident rows
    are skipped.
    """
    Y = np.asarray(sample.Y if isinstance(sample, DataSet) else sample, dtype=float)
    IFs = np.asarray(IFs, dtype=float)
    if Y.shape[0] < 2:
        raise ValueError("need at least two rows")
    asy = np.mean(IFs**2, axis=0)
    gross = np.max(np.abs(IFs), axis=0)
    n = Y.shape[0]
    i, j = np.triu_indices(n, 1)
    shift = np.zeros(IFs.shape[1])
    for start in range(0, i.size, 1_000_000):
        ii, jj = i[start : start + 1_000_000], j[start : start + 1_000_000]
        dist = np.abs(Y[ii] - Y[jj]).sum(axis=1)
        keep = dist > 0
        if np.any(keep):
            ratio = np.abs(IFs[ii[keep]] - IFs[jj[keep]]) / dist[keep, None]
            shift = np.maximum(shift, ratio.max(axis=0))
    return asy, gross, shift


def influence_report(sample: DataSet, params: ModelParams, kind=None, grid=32, names=DEFAULT_NAMES) -> InfluenceReport:
    """Hessian, influence values and sensitivity measures at ``params`` on ``sample``."""
    kind = collapse_kind(params) if kind is None else ModelKind.parse(kind)
    H, spd = expected_hessian(sample, params, grid, kind, names)
    IF = influence_function(sample.Y, params, H, grid, kind, names)
    asy, gross, shift = sensitivity_measures(sample, IF)
    return InfluenceReport(parameter_labels(params, names), IF, asy, gross, shift, H, spd)


# --------------------------------------------------------------------------
# reference studies


def s1_cases():
    """Model configurations of the correctly specified study: ``(label, kind, nu_eps, nu_x)``."""
    cases = [("Gaussian", ModelKind.GaussianPPCA, np.inf, np.inf)]
    cases += [("Student-t", ModelKind.StudentTPPCA, nu, nu) for nu in (4.0, 10.0, 20.0, 100.0)]
    grid = (4.0, 100.0)
    for ne in np.array(np.meshgrid(grid, grid, grid, indexing="ij")).reshape(3, -1).T:
        for nx in np.array(np.meshgrid(grid, grid, indexing="ij")).reshape(2, -1).T:
            cases.append(("Grouped-t", ModelKind.GroupedT, ne, nx))
    return cases


def s1_study(M: int = 1000, seed: int = 0, grid=32, names=DEFAULT_NAMES):
    """Influence measures for each model on data drawn from that same model.

    Returns
    -------
    list of dict
        One entry per case with keys ``label``, ``kind``, ``nu_eps``,
        ``nu_x`` and ``report``.
    """
    from .simulate import s1_params

    out = []
    for idx, (label, kind, ne, nx) in enumerate(s1_cases()):
        params = s1_params(ne, nx)
        data = simulate_case(params, kind, M, seed, idx)
        rep = influence_report(data, params, kind, grid, names)
        out.append({"label": label, "kind": kind, "nu_eps": params.nu_eps, "nu_x": params.nu_x, "report": rep})
        log.debug("S1 case %d (%s) done", idx, label)
    return out


def simulate_case(params, kind, N, seed, index):
    from .simulate import SimSpec

    return simulate(SimSpec(params, kind, N, (int(seed) * 1_000_003 + index) % 2**63))


def summarize_s1(results, measure: str = "asy_var"):
    """Median of ``measure`` per label (Gaussian has a single case)."""
    labels = []
    for r in results:
        if r["label"] not in labels:
            labels.append(r["label"])
    table = {}
    for lab in labels:
        vals = np.array([getattr(r["report"], measure) for r in results if r["label"] == lab])
        table[lab] = np.median(vals, axis=0)
    return table


# --------------------------------------------------------------------------
# MSE study


def _align(W_hat, W_true):
    """Rotate ``W_hat`` onto ``W_true``; the likelihood is invariant to this map for spherical factors."""
    R, _ = orthogonal_procrustes(W_hat, W_true)
    return W_hat @ R


def fit_kind(data: DataSet, kind, k: int, nu_eps, nu_x, config: EmConfig | None = None):
    """Point estimate ``(W, sigma2, converged)`` for one model family."""
    from .em_baselines import fit_gaussian_ppca, fit_student_t_ppca

    kind = ModelKind.parse(kind)
    if kind is ModelKind.GaussianPPCA and data.complete:
        est = fit_gaussian_ppca(data, k)
        return est.W_hat, est.sigma2_hat, True
    if kind is ModelKind.StudentTPPCA:
        est = fit_student_t_ppca(data, k, float(np.atleast_1d(nu_eps)[0]))
        return est.W_hat, est.sigma2_hat, est.converged
    res = fit(data, kind, initialize(data, k, nu_eps, nu_x), config)
    return res.params.W, res.params.sigma2, res.converged


def mse_study(
    true_params: ModelParams,
    kind_list,
    N_list,
    M: int,
    seed: int = 0,
    *,
    data_kind=None,
    config: EmConfig | None = None,
):
    """Mean squared error of ``sigma2`` and ``W`` per fitted family and sample size.

    Every fitted family uses the true degrees of freedom of ``true_params``
    (the shared value for the Student-t baseline). ``W`` estimates are
    Procrustes-aligned to the truth before the errors are taken.

    Returns
    -------
    list of dict
        Rows with keys ``kind``, ``N``, ``parameter``, ``mse``, ``n_ok``,
        ``n_failed``.
    """
    data_kind = collapse_kind(true_params) if data_kind is None else ModelKind.parse(data_kind)
    kinds = [ModelKind.parse(kd) for kd in kind_list]
    k = true_params.k
    sq = {(kd, N): {"sigma2": [], "W": []} for kd in kinds for N in N_list}
    failed = {(kd, N): 0 for kd in kinds for N in N_list}
    for N in N_list:
        for rep in range(M):
            data = simulate_case(true_params, data_kind, N, seed, hash_index(N, rep))
            for kd in kinds:
                try:
                    W, s2, ok = fit_kind(data, kd, k, true_params.nu_eps, true_params.nu_x, config)
                except (np.linalg.LinAlgError, ArithmeticError, ValueError, RuntimeError) as exc:
                    log.warning("fit %s failed at N=%d rep=%d: %s", kd.value, N, rep, exc)
                    failed[(kd, N)] += 1
                    continue
                if not ok:
                    failed[(kd, N)] += 1
                    continue
                sq[(kd, N)]["sigma2"].append((s2 - true_params.sigma2) ** 2)
                sq[(kd, N)]["W"].append(np.mean((_align(W, true_params.W) - true_params.W) ** 2))
    rows = []
    for (kd, N), errs in sq.items():
        for name, vals in errs.items():
            rows.append(
                {
                    "kind": kd.value,
                    "N": int(N),
                    "parameter": name,
                    "mse": float(np.mean(vals)) if vals else float("nan"),
                    "n_ok": len(vals),
                    "n_failed": failed[(kd, N)],
                }
            )
    return rows


def hash_index(N: int, rep: int) -> int:
    return int(N) * 100_003 + int(rep)
