import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stablelift import dynamics as D
from stablelift import observables as O

settings.register_profile("stablelift", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("stablelift")

X0_IRRATIONAL = math.sqrt(2.0) - 1.0


def theta_oracle(x0, steps=12, m=200000, radius=1e-4, seed=0):
    """Fraction of ball points that avoid the ball for ``steps`` iterates of x -> 2x mod 1."""
    rng = np.random.default_rng(seed)
    x = (x0 + radius * (2 * rng.random(m) - 1)) % 1.0
    ok = np.ones(m, dtype=bool)
    for _ in range(steps):
        x = (2 * x) % 1.0
        d = np.abs(x - x0)
        ok &= np.minimum(d, 1 - d) >= radius
    return ok.mean()


@pytest.fixture(scope="session")
def doubling():
    return D.MapSpec.doubling()


@pytest.fixture(scope="session")
def lsv075():
    return D.MapSpec.lsv(0.75)


@pytest.fixture(scope="session")
def frechet15():
    return O.FrechetObservable.single(X0_IRRATIONAL, 1.5)
