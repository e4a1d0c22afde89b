"""Generative samplers for the model family and MCAR masking."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .core_types import DataSet, ModelKind, ModelParams, collapse_kind, validate
from .special_functions import scaling_map


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    """Independent stream keyed by ``(seed, purpose)``."""
    key = zlib.crc32(purpose.encode())
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & (2**64 - 1), key])))


@dataclass(frozen=True)
class SimSpec:
    params: ModelParams
    kind: ModelKind
    N: int
    seed: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be positive")


def _mixing(s, nu):
    """Co-monotone mixing values; one quantile evaluation per distinct ``nu``."""
    nu = np.asarray(nu, dtype=float)
    out = np.ones((s.size, nu.size))
    for val in np.unique(nu):
        if np.isfinite(val):
            cols = nu == val
            out[:, cols] = scaling_map(s, val)[:, None]
    return out


def sample_latent(params: ModelParams, N: int, rng: np.random.Generator):
    """Draw ``(Y, X, U, V)`` from the generative representation."""
    d, k = params.d, params.k
    s_eps = rng.uniform(size=N)
    s_x = rng.uniform(size=N)
    # guard the open interval
    tiny = np.finfo(float).tiny
    s_eps = np.clip(s_eps, tiny, 1 - 2**-53)
    s_x = np.clip(s_x, tiny, 1 - 2**-53)
    U = _mixing(s_eps, params.nu_eps)
    V = _mixing(s_x, params.nu_x)
    Zx = rng.standard_normal((N, k))
    Ze = rng.standard_normal((N, d))
    X = params.delta_x / V + np.sqrt(1.0 / V) * Zx
    eps = params.delta_eps / U + np.sqrt(params.sigma2 / U) * Ze
    Y = params.mu + X @ params.W.T + eps
    return Y, X, U, V


def simulate(spec: SimSpec) -> DataSet:
    """Draw ``N`` fully observed rows. Deterministic for a given seed."""
    kind = ModelKind.parse(spec.kind)
    params = validate(spec.params, kind)
    rng = rng_for(spec.seed, f"simulate/{kind.value}")
    if kind is ModelKind.StudentTPPCA:
        return DataSet(_student_t_rows(params, spec.N, rng))
    Y, *_ = sample_latent(params, spec.N, rng)
    return DataSet(Y)


def _student_t_rows(params: ModelParams, N: int, rng) -> np.ndarray:
    """Classical multivariate t: one shared Gamma scale for factors and noise."""
    d, k = params.d, params.k
    nu = float(params.nu_eps[0])
    w = np.ones(N) if np.isinf(nu) else rng.gamma(nu / 2.0, 2.0 / nu, size=N)
    X = rng.standard_normal((N, k))
    E = np.sqrt(params.sigma2) * rng.standard_normal((N, d))
    return params.mu + (X @ params.W.T + E) / np.sqrt(w)[:, None]


def simulate_params(params: ModelParams, N: int, seed: int = 0, kind=None) -> DataSet:
    kind = collapse_kind(params) if kind is None else ModelKind.parse(kind)
    return simulate(SimSpec(params, kind, N, seed))


def mask_mar(data: DataSet, rate: float, seed: int = 0) -> DataSet:
    """Mask each entry independently with probability ``rate``.

    Rows that would lose every entry are redrawn, so each row keeps at least
    one observation.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must lie in [0, 1)")
    rng = rng_for(seed, "mask")
    observed = data.mask.copy()
    drop = rng.uniform(size=observed.shape) < rate
    empty = (~(observed & ~drop)).all(axis=1)
    while np.any(empty):
        drop[empty] = rng.uniform(size=(int(empty.sum()), observed.shape[1])) < rate
        empty = (~(observed & ~drop)).all(axis=1)
    return DataSet(data.Y, observed & ~drop)


S1_W = np.array([[0.3, 1.0], [1.23, 0.8], [0.021, 0.98]])
S1_SIGMA2 = 0.1


def s1_params(nu_eps=np.inf, nu_x=np.inf, delta_eps=None, delta_x=None) -> ModelParams:
    """Reference d=3, k=2 configuration used by the robustness studies."""
    return ModelParams.create(S1_W, np.zeros(3), S1_SIGMA2, delta_eps, delta_x, nu_eps, nu_x)
