import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tailsink import random_problem

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def small_problem():
    return random_problem(24, 5, d=4, T=6, R=2, seed=3, block=8)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))
