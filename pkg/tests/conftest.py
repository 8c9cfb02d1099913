import numpy as np
import pytest
from hypothesis import settings

from ope_shrink.core import LoggedData, TabularPolicy
from ope_shrink.exact import AtomicInstance, tabular_predictor

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def instance3():
    """3 contexts x 3 actions, every action logged with positive probability."""
    return AtomicInstance(
        p_x=np.array([0.2, 0.5, 0.3]),
        mu=np.array([[0.5, 0.3, 0.2], [0.2, 0.2, 0.6], [1 / 3, 1 / 3, 1 / 3]]),
        pi=np.array([[0.1, 0.1, 0.8], [0.7, 0.2, 0.1], [0.0, 1.0, 0.0]]),
        eta=np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]),
    )


@pytest.fixture
def eta_hat3():
    return tabular_predictor(np.array([[0.6, 0.2, 0.5], [0.1, 0.7, 0.3], [0.9, 0.4, 0.2]]))


def random_logged(rng, n=40, k=4, d=3):
    """Random logged data with a full logging distribution and a stochastic tabular target."""
    mu = rng.dirichlet(np.ones(k), size=n)
    mu = 0.9 * mu + 0.1 / k
    actions = np.array([rng.choice(k, p=row) for row in mu])
    data = LoggedData(np.arange(n), rng.normal(size=(n, d)), actions, rng.random(n),
                      mu[np.arange(n), actions], k, logging_probs=mu)
    target = TabularPolicy(rng.dirichlet(np.ones(k), size=n))
    return data, target


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
