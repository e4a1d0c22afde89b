import numpy as np
import pytest
from scipy import stats

from gstppca import ModelParams
from gstppca.conditional_moments import m_function
from gstppca.quadrature import (
    NonFiniteIntegrand,
    build_grid,
    gauss_legendre_unit,
    integrate_matrix_unit_square,
    integrate_unit_square,
    node_set,
)
from gstppca.special_functions import scaling_map


def test_one_node():
    x, w = gauss_legendre_unit(1)
    assert x.tolist() == [0.5] and w.tolist() == [1.0]


def test_two_nodes():
    x, w = gauss_legendre_unit(2)
    np.testing.assert_allclose(x, [0.5 - 0.5 / np.sqrt(3), 0.5 + 0.5 / np.sqrt(3)], rtol=1e-15)
    np.testing.assert_allclose(w, [0.5, 0.5], rtol=1e-15)


@pytest.mark.parametrize("n", [5, 10, 20, 32])
def test_polynomial_exactness(n):
    x, w = gauss_legendre_unit(n)
    for deg in range(2 * n):
        assert w @ x**deg == pytest.approx(1.0 / (deg + 1), abs=1e-14)


def test_rejects_zero_nodes():
    with pytest.raises(ValueError):
        gauss_legendre_unit(0)


@pytest.mark.parametrize("vectorized", [False, True])
def test_constant_and_separable(vectorized):
    g = build_grid(8)
    one = (lambda a, b: np.ones_like(a)) if vectorized else (lambda a, b: 1.0)
    assert integrate_unit_square(one, g, vectorized=vectorized) == pytest.approx(1.0, abs=1e-15)
    assert integrate_unit_square(lambda a, b: a * b, g, vectorized=vectorized) == pytest.approx(0.25, abs=1e-15)


def test_non_finite_integrand_reports_node():
    g = build_grid(4)
    with pytest.raises(NonFiniteIntegrand) as err:
        integrate_unit_square(lambda a, b: np.inf if a > 0.9 else 1.0, g)
    assert err.value.node[0] > 0.9


def test_matrix_integrals():
    g = build_grid(6)
    C = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(integrate_matrix_unit_square(lambda a, b: C, g), C, atol=1e-14)
    # E[T] = 1 for every degree of freedom; the rule has to resolve the log singularity
    g = build_grid(64)
    D = integrate_matrix_unit_square(lambda a, b: np.diag(scaling_map(a, np.array([2.0, 2.0]))), g)
    np.testing.assert_allclose(np.diag(D), [1.0, 1.0], rtol=2e-3)


def test_inverse_mixing_integral_nu6():
    g = build_grid(64)
    D = integrate_matrix_unit_square(lambda a, b: np.diag(1.0 / scaling_map(a, np.array([6.0, 6.0]))), g)
    np.testing.assert_allclose(np.diag(D), [1.5, 1.5], rtol=5e-3)


def test_node_set_collapses_gaussian_axis():
    ns = node_set(16, [np.inf, np.inf], [4.0])
    assert ns.size == 16
    assert np.all(ns.u == 1.0)
    np.testing.assert_allclose(np.exp(ns.log_w).sum(), 1.0)


def test_density_integral_matches_monte_carlo():
    # I2 for a d=2 Student-t model at a fixed point against plain Monte Carlo over the uniforms
    params = ModelParams.create([[1.0], [0.5]], [0.0, 0.0], 0.4, nu_eps=[5.0, 5.0], nu_x=[5.0])
    y = np.array([0.3, -0.2])
    mask = np.array([True, True])
    quad = integrate_unit_square(lambda a, b: m_function(params, y, mask, a, b), build_grid(32))
    rng = np.random.default_rng(0)
    n = 10**6
    s = rng.uniform(size=(n, 2))
    u = scaling_map(s[:, :1], 5.0)[:, 0]
    v = scaling_map(s[:, 1:], 5.0)[:, 0]
    W = params.W[:, 0]
    # 2x2 covariance W W^T / v + sigma2 I / u evaluated in closed form
    a = W[0] ** 2 / v + 0.4 / u
    c = W[1] ** 2 / v + 0.4 / u
    b = W[0] * W[1] / v
    det = a * c - b * b
    q = (c * y[0] ** 2 - 2 * b * y[0] * y[1] + a * y[1] ** 2) / det
    vals = np.exp(-0.5 * q) / (2 * np.pi * np.sqrt(det))
    se = vals.std() / np.sqrt(n)
    assert abs(quad - vals.mean()) < 3 * se
    assert stats.norm.cdf(0) == 0.5


@pytest.mark.parametrize("n", [1, 2, 16, 32, 64, 128])
def test_mixing_rule_invariants(n):
    g = build_grid(n, "mixing")
    for s, up, w in ((g.nodes_eps, g.upper_eps, g.weights_eps), (g.nodes_x, g.upper_x, g.weights_x)):
        assert np.all((s > 0) & (s < 1)) and np.all(up > 0)
        np.testing.assert_allclose(s + up, 1.0, atol=1e-15)
        assert np.all(w > 0)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_unknown_rule():
    with pytest.raises(ValueError):
        build_grid(8, "simpson")


@pytest.mark.parametrize("nu, tol", [(3.0, 1e-4), (4.0, 1e-6), (10.0, 1e-8), (100.0, 1e-8)])
def test_mixing_rule_integrates_mixing_moments(nu, tol):
    ns = node_set(64, [nu], [np.inf])
    w = np.exp(ns.log_w)
    assert w @ ns.u[:, 0] == pytest.approx(1.0, rel=1e-8)
    # 1/T has a heavy lower tail for small nu, so the truncation shows first there
    assert w @ (1.0 / ns.u[:, 0]) == pytest.approx(nu / (nu - 2), rel=tol)


def test_integer_grid_means_mixing_rule():
    a = node_set(16, [4.0], [5.0])
    b = node_set(build_grid(16, "mixing"), [4.0], [5.0])
    assert np.array_equal(a.u, b.u) and np.array_equal(a.log_w, b.log_w)
    c = node_set(build_grid(16), [4.0], [5.0])
    assert not np.array_equal(a.u, c.u)


def test_extreme_nodes_stay_finite():
    # tails reach 1e-30 in probability; the mixing values span many decades
    ns = node_set(128, [1.0, 4.0, 100.0], [2.0])
    assert np.all(np.isfinite(ns.u)) and np.all(ns.u > 0)
    assert ns.u[:, 0].min() < 1e-50
