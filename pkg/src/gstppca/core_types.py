"""Parameter vectors, data containers and model-family descriptors."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np


class ValidationError(ValueError):
    """Base class for parameter and data validation failures."""


class DimensionMismatch(ValidationError):
    pass


class NonPositiveScale(ValidationError):
    pass


class KindConstraint(ValidationError):
    pass


class ModelKind(str, enum.Enum):
    """Members of the generalized skew-t PPCA family."""

    GaussianPPCA = "GaussianPPCA"
    StudentTPPCA = "StudentTPPCA"
    GStGeneral = "GStGeneral"
    GroupedT = "GroupedT"
    StudentTGSt = "StudentTGSt"
    SkewTGStSimplified = "SkewTGStSimplified"

    @classmethod
    def parse(cls, value: "str | ModelKind") -> "ModelKind":
        if isinstance(value, cls):
            return value
        key = str(value).replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"unknown model kind {value!r}")


def _row(a, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(a, dtype=float))
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ModelParams:
    """Static parameter vector of the model.

    All vectors use the row convention, ``y = mu + x @ W.T + eps``.
    Infinite degrees of freedom denote a Gaussian (non-mixed) margin.

    Parameters
    ----------
    W : ndarray, shape (d, k)
        Projection matrix.
    mu : ndarray, shape (d,)
        Intercept.
    sigma2 : float
        Noise scale.
    delta_eps, delta_x : ndarray
        Skewness of the error term (d,) and of the latent factors (k,).
    nu_eps, nu_x : ndarray
        Degrees of freedom per error margin (d,) and per latent margin (k,).
    """

    W: np.ndarray
    mu: np.ndarray
    sigma2: float
    delta_eps: np.ndarray
    delta_x: np.ndarray
    nu_eps: np.ndarray
    nu_x: np.ndarray

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float)).copy()
        W.setflags(write=False)
        object.__setattr__(self, "W", W)
        for name in ("mu", "delta_eps", "delta_x", "nu_eps", "nu_x"):
            object.__setattr__(self, name, _row(getattr(self, name), name))
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def k(self) -> int:
        return self.W.shape[1]

    @classmethod
    def create(
        cls,
        W,
        mu=None,
        sigma2: float = 1.0,
        delta_eps=None,
        delta_x=None,
        nu_eps=np.inf,
        nu_x=np.inf,
    ) -> "ModelParams":
        """Build parameters with broadcasting of scalar defaults."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        d, k = W.shape
        mu = np.zeros(d) if mu is None else mu
        delta_eps = np.zeros(d) if delta_eps is None else delta_eps
        delta_x = np.zeros(k) if delta_x is None else delta_x
        nu_eps = np.broadcast_to(np.asarray(nu_eps, dtype=float), (d,))
        nu_x = np.broadcast_to(np.asarray(nu_x, dtype=float), (k,))
        return cls(W, mu, sigma2, delta_eps, delta_x, nu_eps, nu_x)

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        def enc(a):
            return [None if np.isinf(x) else float(x) for x in np.ravel(a)]

        return {
            "W": self.W.tolist(),
            "mu": self.mu.tolist(),
            "sigma2": self.sigma2,
            "delta_eps": self.delta_eps.tolist(),
            "delta_x": self.delta_x.tolist(),
            "nu_eps": enc(self.nu_eps),
            "nu_x": enc(self.nu_x),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        def dec(a):
            return [np.inf if x is None else float(x) for x in a]

        return cls(
            np.asarray(data["W"], dtype=float),
            data["mu"],
            data["sigma2"],
            data["delta_eps"],
            data["delta_x"],
            dec(data["nu_eps"]),
            dec(data["nu_x"]),
        )


@dataclass(frozen=True)
class DataSet:
    """Observation matrix with its missingness mask (True = observed)."""

    Y: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float)).copy()
        mask = np.isfinite(Y) if self.mask is None else np.asarray(self.mask, dtype=bool).copy()
        if mask.shape != Y.shape:
            raise DimensionMismatch(f"mask shape {mask.shape} != data shape {Y.shape}")
        mask &= np.isfinite(Y)
        if not np.all(mask.any(axis=1)):
            bad = np.flatnonzero(~mask.any(axis=1))
            raise ValidationError(f"rows without observed entries: {bad[:10].tolist()}")
        Y[~mask] = np.nan
        Y.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "mask", mask)

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def d(self) -> int:
        return self.Y.shape[1]

    @property
    def complete(self) -> bool:
        return bool(self.mask.all())


@dataclass(frozen=True)
class FitResult:
    """Outcome of an EM fit."""

    params: ModelParams
    kind: ModelKind
    loglik_trace: np.ndarray
    iterations: int
    converged: bool
    cov: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    cov_defined: bool = True
    info: dict = field(default_factory=dict)

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


def _is_zero(a) -> bool:
    return bool(np.all(np.asarray(a) == 0.0))


def _all_equal(a) -> bool:
    a = np.asarray(a)
    return bool(np.all(a == a[0]))


def validate(params: ModelParams, kind: ModelKind | str = ModelKind.GStGeneral) -> ModelParams:
    """Check shapes, positivity and the constraints implied by ``kind``."""
    kind = ModelKind.parse(kind)
    W = params.W
    if W.ndim != 2:
        raise DimensionMismatch("W must be a matrix")
    d, k = W.shape
    if k > d or k < 1:
        raise DimensionMismatch(f"need 1 <= k <= d, got d={d}, k={k}")
    for name, size in (("mu", d), ("delta_eps", d), ("nu_eps", d), ("delta_x", k), ("nu_x", k)):
        if getattr(params, name).shape != (size,):
            raise DimensionMismatch(f"{name} has shape {getattr(params, name).shape}, expected ({size},)")
    if not np.isfinite(params.sigma2) or params.sigma2 <= 0:
        raise NonPositiveScale(f"sigma2 must be positive, got {params.sigma2}")
    for name in ("nu_eps", "nu_x"):
        nu = getattr(params, name)
        if np.any(np.isnan(nu)) or np.any(nu <= 0):
            raise NonPositiveScale(f"{name} entries must be positive")
    if not np.all(np.isfinite(W)) or not np.all(np.isfinite(params.mu)):
        raise ValidationError("W and mu must be finite")
    if np.linalg.svd(W, compute_uv=False)[-1] <= 1e-12:
        raise ValidationError("W must have full column rank")

    zero_skew = _is_zero(params.delta_eps) and _is_zero(params.delta_x)
    if kind in (ModelKind.GroupedT, ModelKind.StudentTGSt, ModelKind.GaussianPPCA, ModelKind.StudentTPPCA):
        if not zero_skew:
            raise KindConstraint(f"{kind.value} requires zero skewness")
    if kind in (ModelKind.StudentTGSt, ModelKind.SkewTGStSimplified):
        if not (_all_equal(params.nu_eps) and _all_equal(params.nu_x)):
            raise KindConstraint(f"{kind.value} requires one degree of freedom per vector")
    if kind is ModelKind.SkewTGStSimplified and not _is_zero(params.delta_eps):
        raise KindConstraint("SkewTGStSimplified requires delta_eps = 0")
    if kind is ModelKind.GaussianPPCA and not (np.all(np.isinf(params.nu_eps)) and np.all(np.isinf(params.nu_x))):
        raise KindConstraint("GaussianPPCA requires infinite degrees of freedom")
    if kind is ModelKind.StudentTPPCA:
        nus = np.concatenate([params.nu_eps, params.nu_x])
        if not _all_equal(nus):
            raise KindConstraint("StudentTPPCA uses a single shared degree of freedom")
    return params


def collapse_kind(params: ModelParams) -> ModelKind:
    """Most specific GSt family member consistent with ``params``."""
    zero_skew = _is_zero(params.delta_eps) and _is_zero(params.delta_x)
    equal_nu = _all_equal(params.nu_eps) and _all_equal(params.nu_x)
    if zero_skew and np.all(np.isinf(params.nu_eps)) and np.all(np.isinf(params.nu_x)):
        return ModelKind.GaussianPPCA
    if zero_skew and equal_nu:
        return ModelKind.StudentTGSt
    if zero_skew:
        return ModelKind.GroupedT
    if equal_nu and _is_zero(params.delta_eps):
        return ModelKind.SkewTGStSimplified
    return ModelKind.GStGeneral
