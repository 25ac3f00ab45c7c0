import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from shadowlab.models import CatMap, GradientTorus, NorthSouthCircle

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def cat():
    return CatMap()


@pytest.fixture(scope="session")
def nsc():
    return NorthSouthCircle(a=0.1)


@pytest.fixture(scope="session")
def gt():
    return GradientTorus(t=0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
