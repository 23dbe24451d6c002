import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from automix import tensor as T

settings.register_profile(
    "ci",
    deadline=None,
    derandomize=True,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


@pytest.fixture(autouse=True)
def fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
