import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wavemaps.fields import RadialGrid

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def grid_fine() -> RadialGrid:
    return RadialGrid.geometric(1e-4, 1e4, 0.025)


@pytest.fixture(scope="session")
def grid_medium() -> RadialGrid:
    return RadialGrid.geometric(1e-3, 1e3, 0.025)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)
