import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from gstppca import ModelParams
from gstppca.conditional_moments import (
    conditional_blocks,
    gaussian_condition,
    log_m_function,
    m_function,
    missing_conditional,
    y_moments_given_missing,
)
from gstppca.special_functions import mixing_vectors

from conftest import random_params


def joint_moments(params, u, v):
    """Mean and covariance of (x, y) for fixed mixing values, built from the generative form."""
    W = params.W
    d, k = W.shape
    mx = params.delta_x / v
    Sx = np.diag(1.0 / v)
    me = params.delta_eps / u
    Se = params.sigma2 * np.diag(1.0 / u)
    my = params.mu + mx @ W.T + me
    Syy = W @ Sx @ W.T + Se
    Sxy = Sx @ W.T
    mean = np.concatenate([mx, my])
    cov = np.block([[Sx, Sxy], [Sxy.T, Syy]])
    return mean, cov


@pytest.mark.parametrize("seed", range(5))
def test_m_function_is_observed_density(seed):
    rng = np.random.default_rng(seed)
    d, k = 4, 2
    params = random_params(rng, d, k)
    y = rng.normal(size=d)
    mask = np.array([True, False, True, True])
    s_eps, s_x = rng.uniform(0.05, 0.95, size=2)
    mv = mixing_vectors(s_eps, s_x, params.nu_eps, params.nu_x)
    mean, cov = joint_moments(params, mv.u, mv.v)
    o = k + np.flatnonzero(mask)
    expect = stats.multivariate_normal(mean[o], cov[np.ix_(o, o)]).logpdf(y[mask])
    assert log_m_function(params, y, mask, s_eps, s_x) == pytest.approx(expect, rel=1e-10)


def test_gaussian_limit_is_ppca_density():
    W = np.array([[1.0, 0.2], [0.3, -0.5], [0.0, 0.7]])
    params = ModelParams.create(W, [0.1, 0.2, 0.3], 0.5)
    y = np.array([0.4, -1.0, 0.2])
    mask = np.ones(3, dtype=bool)
    expect = stats.multivariate_normal([0.1, 0.2, 0.3], W @ W.T + 0.5 * np.eye(3)).pdf(y)
    for s in (0.1, 0.5, 0.9):
        assert m_function(params, y, mask, s, 1 - s) == pytest.approx(expect, rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_blocks_match_brute_force_conditioning(seed):
    rng = np.random.default_rng(100 + seed)
    params = random_params(rng, 5, 2)
    u = rng.uniform(0.3, 2.0, size=5)
    v = rng.uniform(0.3, 2.0, size=2)
    mean, cov = joint_moments(params, u, v)
    b = conditional_blocks(params, u, v)
    np.testing.assert_allclose(b.mu_y, mean[2:], atol=1e-12)
    np.testing.assert_allclose(b.Sigma_y, cov[2:, 2:], rtol=1e-10, atol=1e-12)
    y = rng.normal(size=5)
    mx, Sx = gaussian_condition(mean, cov, np.arange(2, 7), y)
    np.testing.assert_allclose(b.mu_x(y), mx, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(b.Sigma_x, Sx, rtol=1e-9, atol=1e-12)


def test_bivariate_condition():
    mu_c, S_c = gaussian_condition([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]], [0], [1.0])
    assert mu_c[0] == pytest.approx(0.5) and S_c[0, 0] == pytest.approx(0.75)


def test_condition_against_monte_carlo():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(4, 4))
    Sigma = A @ A.T + np.eye(4)
    mu = rng.normal(size=4)
    mu_c, S_c = gaussian_condition(mu, Sigma, [0, 2], [mu[0] + 0.3, mu[2] - 0.2])
    # Gaussian regression of the free coordinates on the observed ones
    Z = rng.multivariate_normal(mu, Sigma, size=400_000)
    X = np.column_stack([np.ones(Z.shape[0]), Z[:, [0, 2]]])
    beta, *_ = np.linalg.lstsq(X, Z[:, [1, 3]], rcond=None)
    pred = np.array([1.0, mu[0] + 0.3, mu[2] - 0.2]) @ beta
    resid = Z[:, [1, 3]] - X @ beta
    np.testing.assert_allclose(pred, mu_c, atol=0.02)
    np.testing.assert_allclose(np.cov(resid.T), S_c, rtol=0.02)


@pytest.mark.parametrize("idx", [[], [0, 1, 2]])
def test_condition_rejects_trivial_sets(idx):
    with pytest.raises(ValueError):
        gaussian_condition(np.zeros(3), np.eye(3), idx, np.zeros(len(idx)))


def test_missing_moments_complete_row():
    params = random_params(np.random.default_rng(0), 3, 1)
    b = conditional_blocks(params, np.ones(3), np.ones(1))
    y = np.array([1.0, 2.0, 3.0])
    mu_m, S_m = missing_conditional(b, y, np.ones(3, dtype=bool))
    assert mu_m.size == 0 and S_m.shape == (0, 0)
    Ey, Eyy = y_moments_given_missing(b, y, np.ones(3, dtype=bool))
    np.testing.assert_array_equal(Ey, y)
    np.testing.assert_array_equal(Eyy, np.outer(y, y))


def test_missing_moments_add_conditional_covariance():
    params = random_params(np.random.default_rng(1), 4, 2)
    b = conditional_blocks(params, np.full(4, 0.7), np.array([1.3, 0.6]))
    y = np.array([0.5, np.nan, -0.2, np.nan])
    mask = np.isfinite(y)
    mu_m, S_m = gaussian_condition(b.mu_y, b.Sigma_y, [0, 2], y[[0, 2]])
    Ey, Eyy = y_moments_given_missing(b, y, mask)
    np.testing.assert_allclose(Ey[[1, 3]], mu_m)
    np.testing.assert_allclose(Eyy[np.ix_([1, 3], [1, 3])], S_m + np.outer(mu_m, mu_m))
    assert Eyy[0, 0] == pytest.approx(0.25)


def test_rejects_non_positive_mixing():
    params = random_params(np.random.default_rng(2), 3, 1)
    with pytest.raises(ValueError):
        conditional_blocks(params, np.array([1.0, 0.0, 1.0]), np.ones(1))


@given(st.integers(0, 10_000), st.floats(0.02, 0.98), st.floats(0.02, 0.98))
def test_conditional_covariances_are_spd(seed, s_eps, s_x):
    rng = np.random.default_rng(seed)
    params = random_params(rng, 4, 2)
    mv = mixing_vectors(s_eps, s_x, params.nu_eps, params.nu_x)
    b = conditional_blocks(params, mv.u, mv.v)
    assert np.linalg.eigvalsh(b.Sigma_x).min() > 0
    assert np.linalg.eigvalsh(b.Sigma_y).min() > 0
