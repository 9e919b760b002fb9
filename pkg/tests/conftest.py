import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ieqn.dist import EmpiricalDistribution

settings.register_profile("repo", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def bernoulli():
    return EmpiricalDistribution.uniform([0.0, 1.0])
