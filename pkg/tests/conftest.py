import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gstppca import ModelParams

settings.register_profile("default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_params(rng, d, k, *, skew=True, nu_eps=None, nu_x=None, sigma2=None):
    W = rng.normal(size=(d, k))
    mu = rng.normal(size=d)
    s2 = float(rng.uniform(0.2, 0.8)) if sigma2 is None else sigma2
    de = 0.4 * rng.normal(size=d) if skew else None
    dx = 0.4 * rng.normal(size=k) if skew else None
    ne = rng.choice([3.0, 5.0, 8.0, 30.0], size=d) if nu_eps is None else nu_eps
    nx = rng.choice([3.0, 5.0, 8.0, 30.0], size=k) if nu_x is None else nu_x
    return ModelParams.create(W, mu, s2, de, dx, ne, nx)
