import numpy as np
import pytest

from gstppca.core_types import DataSet, ModelKind, ModelParams
from gstppca.influence import (
    _inverse,
    expected_hessian,
    flatten,
    influence_function,
    influence_report,
    parameter_labels,
    rotation_directions,
    score,
    score_matrix,
    sensitivity_measures,
    unflatten,
)
from gstppca.simulate import SimSpec, s1_params, simulate

G = ModelKind.GaussianPPCA


def gaussian_score(y, params):
    """Analytic gradient of the Gaussian PPCA log-density in (sigma2, W column-major)."""
    C = params.W @ params.W.T + params.sigma2 * np.eye(params.d)
    Ci = np.linalg.inv(C)
    a = Ci @ (y - params.mu)
    g_C = 0.5 * (np.outer(a, a) - Ci)
    g_s2 = np.trace(g_C)
    g_W = 2.0 * g_C @ params.W
    return np.concatenate([[g_s2], g_W.ravel(order="F")])


def test_flatten_round_trip():
    p = s1_params(4.0, 4.0, delta_eps=[0.1, 0.2, 0.3], delta_x=[0.4, 0.5])
    names = ("sigma2", "W", "mu", "delta_eps", "delta_x")
    theta = flatten(p, names)
    assert theta.size == len(parameter_labels(p, names)) == 1 + 6 + 3 + 3 + 2
    back = unflatten(theta, p, names)
    np.testing.assert_array_equal(back.W, p.W)
    np.testing.assert_array_equal(back.delta_x, p.delta_x)
    assert parameter_labels(p)[:3] == ("sigma2", "W[0,0]", "W[1,0]")


@pytest.mark.parametrize("kind", [G, ModelKind.GStGeneral])
def test_gaussian_limit_score_matches_analytic(rng, kind):
    nu = np.inf if kind is G else 1e8
    p = s1_params(nu, nu)
    for _ in range(3):
        y = rng.standard_normal(3)
        np.testing.assert_allclose(score(y, p, kind=kind), gaussian_score(y, p), atol=1e-4)


def test_score_of_mu_vanishes_at_center():
    p = s1_params(4.0, [4.0, 100.0])
    s = score(p.mu, p, kind=ModelKind.StudentTGSt, names=("mu",))
    np.testing.assert_allclose(s, 0.0, atol=1e-6)


def test_step_halving_is_second_order(rng):
    p = s1_params()
    y = rng.standard_normal(3) * 2.0
    exact = gaussian_score(y, p)
    theta = flatten(p)
    h = 0.02 * (1.0 + np.abs(theta))
    e1 = score(y, p, kind=G, h=h) - exact
    e2 = score(y, p, kind=G, h=h / 2) - exact
    big = np.abs(e1) > 1e-7
    assert big.sum() >= 3
    ratio = np.abs(e1[big] / e2[big])
    np.testing.assert_allclose(ratio, 4.0, rtol=0.05)


def test_univariate_fisher_information(rng):
    sigma2 = 0.7
    p = ModelParams.create(np.array([[1e-4]]), np.zeros(1), sigma2)
    data = simulate(SimSpec(p, G, 200_000, 3))
    H, spd = expected_hessian(data, p, kind=G, names=("sigma2",))
    assert spd
    np.testing.assert_allclose(-H[0, 0], 1.0 / (2.0 * sigma2**2), rtol=0.05)


def test_hessian_symmetric_and_flagged(rng):
    p = s1_params(4.0, 4.0)
    data = simulate(SimSpec(p, ModelKind.StudentTGSt, 300, 5))
    H, spd = expected_hessian(data, p, kind=ModelKind.StudentTGSt)
    assert np.max(np.abs(H - H.T)) < 1e-6
    assert isinstance(spd, bool)


def test_hessian_rejects_missing():
    p = s1_params()
    Y = np.ones((5, 3))
    Y[0, 0] = np.nan
    with pytest.raises(ValueError):
        expected_hessian(DataSet(Y), p, kind=G)


def test_influence_of_mean_is_residual(rng):
    p = s1_params()
    data = simulate(SimSpec(p, G, 500, 7))
    H, _ = expected_hessian(data, p, kind=G, names=("mu",))
    y = np.array([0.5, -1.0, 2.0])
    np.testing.assert_allclose(influence_function(y, p, H, kind=G, names=("mu",)), y - p.mu, atol=1e-5)


def test_influence_of_mean_scales_with_data():
    p = s1_params()
    c = 3.0
    q = p.replace(W=c * p.W, sigma2=c**2 * p.sigma2, mu=c * p.mu)
    y = np.array([0.5, -1.0, 2.0])
    Hp = -np.linalg.inv(p.W @ p.W.T + p.sigma2 * np.eye(3))
    Hq = Hp / c**2
    np.testing.assert_allclose(
        influence_function(c * y, q, Hq, kind=G, names=("mu",)),
        c * influence_function(y, p, Hp, kind=G, names=("mu",)),
        rtol=1e-5,
    )


@pytest.mark.parametrize("kind, nu", [(G, np.inf), (ModelKind.StudentTGSt, 4.0)])
def test_influence_has_zero_mean(kind, nu):
    p = s1_params(nu, nu)
    data = simulate(SimSpec(p, kind, 4000, 11))
    H, _ = expected_hessian(data, p, kind=kind)
    IF = influence_function(data.Y, p, H, kind=kind)
    se = IF.std(axis=0, ddof=1) / np.sqrt(IF.shape[0])
    assert np.all(np.abs(IF.mean(axis=0)) < 4.0 * se)


def test_constant_influence_column(rng):
    Y = rng.standard_normal((20, 3))
    IF = np.column_stack([np.full(20, 2.5), rng.standard_normal(20)])
    asy, gross, shift = sensitivity_measures(Y, IF)
    assert gross[0] == 2.5
    assert shift[0] == 0.0
    assert asy[0] == pytest.approx(6.25)


def test_duplicate_rows_skipped(rng):
    Y = rng.standard_normal((6, 2))
    Y[1] = Y[0]
    IF = rng.standard_normal((6, 1))
    _, _, shift = sensitivity_measures(Y, IF)
    assert np.isfinite(shift).all()
    dist = np.abs(Y[:, None, :] - Y[None, :, :]).sum(-1)
    diff = np.abs(IF[:, None, 0] - IF[None, :, 0])
    keep = dist > 0
    assert shift[0] == pytest.approx(np.max(diff[keep] / dist[keep]))


def test_sensitivity_needs_two_rows():
    with pytest.raises(ValueError):
        sensitivity_measures(np.zeros((1, 2)), np.zeros((1, 1)))


@pytest.fixture(scope="module")
def grouped_report():
    p = s1_params(4.0, [4.0, 100.0])
    data = simulate(SimSpec(p, ModelKind.GroupedT, 600, 13))
    return p, data, influence_report(data, p, ModelKind.GroupedT)


def test_sandwich_identity(grouped_report):
    p, data, rep = grouped_report
    S = score_matrix(data.Y, p, ModelKind.GroupedT)
    Hi = _inverse(rep.hessian, rotation_directions(p))
    sandwich = np.diag(Hi @ (S.T @ S / S.shape[0]) @ Hi)
    np.testing.assert_allclose(rep.asy_var, sandwich, rtol=1e-10)


@pytest.mark.parametrize("a", [1.0, 2.0, 5.0])
def test_chebyshev_screening(grouped_report, a):
    _, _, rep = grouped_report
    IF = rep.IF
    n = IF.shape[0]
    frac = np.mean(np.abs(IF) > a, axis=0)
    bound = np.mean(IF**2, axis=0) / a**2
    se = np.sqrt(np.maximum(frac * (1 - frac), 1.0 / n) / n)
    assert np.all(frac <= bound + 4.0 * se)


def test_report_shapes(grouped_report):
    p, data, rep = grouped_report
    assert rep.IF.shape == (data.N, 7)
    assert rep.labels == parameter_labels(p)
    assert np.all(rep.gross_error >= np.sqrt(rep.asy_var) - 1e-12)


def test_rotation_directions_are_flat(rng):
    p = s1_params(4.0, 4.0)
    data = simulate(SimSpec(p, ModelKind.StudentTGSt, 2000, 17))
    H, _ = expected_hessian(data, p, kind=ModelKind.StudentTGSt)
    T = rotation_directions(p)
    assert T.shape == (7, 1)
    t = T[:, 0] / np.linalg.norm(T)
    assert abs(t @ H @ t) < 1e-2 * np.abs(np.linalg.eigvalsh(H)).max()


@pytest.mark.parametrize(
    "params",
    [s1_params(4.0, [4.0, 100.0]), s1_params(4.0, 4.0, delta_x=[0.3, 0.0]),
     ModelParams.create([[1.0], [0.5]], [0.0, 0.0], 0.1)],
)
def test_no_flat_directions_without_rotation_symmetry(params):
    assert rotation_directions(params).shape[1] == 0


def test_influence_ignores_flat_direction_noise():
    p = s1_params()
    data = simulate(SimSpec(p, G, 500, 19))
    H, _ = expected_hessian(data, p, kind=G)
    t = rotation_directions(p)[:, 0]
    t /= np.linalg.norm(t)
    y = np.array([0.5, -1.0, 2.0])
    a = influence_function(y, p, H, kind=G)
    b = influence_function(y, p, H - 0.05 * np.outer(t, t), kind=G)
    np.testing.assert_allclose(a, b, atol=1e-8)
