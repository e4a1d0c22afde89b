"""Tensor-product quadrature on the unit square."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .special_functions import scaling_map


class NonFiniteIntegrand(ArithmeticError):
    """Raised when an integrand is not finite at a quadrature node."""

    def __init__(self, s_eps, s_x, value):
        super().__init__(f"integrand not finite at node (s_eps={s_eps:.6g}, s_x={s_x:.6g}): {value}")
        self.node = (float(s_eps), float(s_x))


@dataclass(frozen=True)
class QuadratureGrid:
    """Nodes and weights per axis of the unit square; weights sum to one.

    ``rule`` is ``"legendre"`` (affine Gauss-Legendre) or ``"mixing"``
    (see :func:`mixing_rule_unit`).
    ``upper_eps`` and ``upper_x`` hold ``1 - s`` to full relative precision.
    """

    nodes_eps: np.ndarray
    weights_eps: np.ndarray
    nodes_x: np.ndarray
    weights_x: np.ndarray
    n: int
    rule: str = "legendre"
    upper_eps: np.ndarray = None
    upper_x: np.ndarray = None

    def __post_init__(self):
        if self.upper_eps is None:
            object.__setattr__(self, "upper_eps", 1.0 - np.asarray(self.nodes_eps))
        if self.upper_x is None:
            object.__setattr__(self, "upper_x", 1.0 - np.asarray(self.nodes_x))


@lru_cache(maxsize=64)
def _gauss_legendre_unit(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    nodes = 0.5 * (x + 1.0)
    weights = 0.5 * w
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def gauss_legendre_unit(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule mapped affinely from [-1, 1] to (0, 1)."""
    if int(n) < 1:
        raise ValueError("need at least one node")
    return _gauss_legendre_unit(int(n))


# reference mixing law of the engine rule: Gamma(2, rate 2), i.e. chi2_4 / 4
_REF_SHAPE = 2.0


def _tails(n: int) -> tuple[float, float]:
    """Probability left out below and above the ``n``-node mixing rule.

    The upper cut stays above 1e-15 so that every node is representable
    below one; the reference law decays double-exponentially there.
    """
    q = 10.0 ** (-0.25 * n)
    return max(q, 1e-30), max(q, 1e-15)


@lru_cache(maxsize=64)
def _mixing_rule(n: int):
    a = _REF_SHAPE
    if n == 1:
        t = np.array([special.gammaincinv(a, 0.5) / a])
        w = np.ones(1)
    else:
        q_lo, q_hi = _tails(n)
        lo = np.log(special.gammaincinv(a, q_lo) / a)
        hi = np.log(special.gammainccinv(a, q_hi) / a)
        h = (hi - lo) / (n - 1)
        tau = lo + h * np.arange(n)
        t = np.exp(tau)
        w = np.exp(a * np.log(a) - special.gammaln(a) + a * tau - a * t)
        w /= w.sum()
    out = (special.gammainc(a, a * t), special.gammaincc(a, a * t), w)
    for arr in out:
        arr.setflags(write=False)
    return out


def mixing_rule_unit(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Trapezoid rule in ``log T`` for a reference ``T ~ Gamma(2, rate 2)``, carried to (0, 1).

    Returns ``(s, 1 - s, weights)``. The E-step integrands are smooth,
    rapidly decaying functions of ``log T``, where the trapezoid rule
    converges geometrically; in ``s`` itself they carry algebraic endpoint
    singularities that hold Gauss-Legendre to an ``O(n^-2)`` rate. The rule
    leaves out ``10^(-n/4)`` of the reference law in each tail, floored at
    1e-30 below and 1e-15 above.
    """
    if int(n) < 1:
        raise ValueError("need at least one node")
    return _mixing_rule(int(n))


RULES = ("legendre", "mixing")


def build_grid(n: int, rule: str = "legendre") -> QuadratureGrid:
    """Tensor grid with ``n`` nodes per axis."""
    if rule == "legendre":
        nodes, weights = gauss_legendre_unit(n)
        return QuadratureGrid(nodes, weights, nodes, weights, int(n), rule)
    if rule == "mixing":
        s, upper, w = mixing_rule_unit(n)
        return QuadratureGrid(s, w, s, w, int(n), rule, upper, upper)
    raise ValueError(f"unknown quadrature rule {rule!r}; expected one of {RULES}")


def _check(values, SE, SX):
    bad = ~np.isfinite(values)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        i, j = idx[0], idx[1]
        raise NonFiniteIntegrand(SE[i, j], SX[i, j], values[tuple(idx)])


def integrate_unit_square(f, grid: QuadratureGrid, *, vectorized: bool = False) -> float:
    """Tensor-product sum ``sum_ij w_i w_j f(s_i, s_j)``.

    With ``vectorized=True`` ``f`` receives 2-D arrays of node coordinates
    and must return an array of the same shape.
    """
    SE, SX = np.meshgrid(grid.nodes_eps, grid.nodes_x, indexing="ij")
    if vectorized:
        vals = np.broadcast_to(np.asarray(f(SE, SX), dtype=float), SE.shape)
    else:
        vals = np.array([[float(f(a, b)) for a, b in zip(ra, rb)] for ra, rb in zip(SE, SX)])
    _check(vals, SE, SX)
    return float(grid.weights_eps @ vals @ grid.weights_x)


def integrate_matrix_unit_square(f, grid: QuadratureGrid) -> np.ndarray:
    """Elementwise analogue of :func:`integrate_unit_square` for array-valued ``f``."""
    total = None
    for i, se in enumerate(grid.nodes_eps):
        for j, sx in enumerate(grid.nodes_x):
            val = np.asarray(f(se, sx), dtype=float)
            if not np.all(np.isfinite(val)):
                raise NonFiniteIntegrand(se, sx, val)
            term = grid.weights_eps[i] * grid.weights_x[j] * val
            total = term if total is None else total + term
    return total


@dataclass(frozen=True)
class NodeSet:
    """Flattened quadrature nodes with their mixing values.

    Axes whose degrees of freedom are all infinite collapse to one node,
    since the mixing value is identically one there.
    """

    u: np.ndarray  # (G, d)
    v: np.ndarray  # (G, k)
    log_w: np.ndarray  # (G,)
    s_eps: np.ndarray  # (G,)
    s_x: np.ndarray  # (G,)

    @property
    def size(self) -> int:
        return self.log_w.shape[0]


def _axis(n, rule, nu):
    nu = np.asarray(nu, dtype=float)
    if np.all(np.isinf(nu)):
        return np.array([0.5]), np.array([1.0]), np.ones((1, nu.size))
    g = build_grid(n, rule)
    nodes, weights = g.nodes_eps, g.weights_eps
    return nodes, weights, scaling_map(nodes[:, None], nu[None, :], g.upper_eps[:, None])


@lru_cache(maxsize=256)
def _node_set_cached(n: int, rule: str, nu_eps: tuple, nu_x: tuple) -> NodeSet:
    se, we, U = _axis(n, rule, nu_eps)
    sx, wx, V = _axis(n, rule, nu_x)
    ne, nx = se.size, sx.size
    u = np.repeat(U, nx, axis=0)
    v = np.tile(V, (ne, 1))
    log_w = (np.log(we)[:, None] + np.log(wx)[None, :]).ravel()
    s_e = np.repeat(se, nx)
    s_x = np.tile(sx, ne)
    for a in (u, v, log_w, s_e, s_x):
        a.setflags(write=False)
    return NodeSet(u, v, log_w, s_e, s_x)


def node_set(grid: QuadratureGrid | int, nu_eps, nu_x) -> NodeSet:
    """Mixing values at every node of ``grid`` for the given degrees of freedom (cached).

    An integer ``grid`` means the mixing rule with that many nodes.
    """
    if isinstance(grid, (int, np.integer)):
        n, rule = int(grid), "mixing"
    else:
        n, rule = grid.n, grid.rule
    key_e = tuple(float(x) for x in np.ravel(nu_eps))
    key_x = tuple(float(x) for x in np.ravel(nu_x))
    return _node_set_cached(int(n), rule, key_e, key_x)
