import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pccmjo import gridio

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# small periodic grid for fast tests: 5 latitude rows, 16 longitudes
SMALL_GRID = gridio.GridSpec(n_lat=5, n_lon=16, lat_start_deg=-5.0, lat_step_deg=2.5,
                             lon_start_deg=0.0, lon_step_deg=22.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_grid():
    return SMALL_GRID


def small_synthetic(**kw) -> gridio.SyntheticConfig:
    base = dict(n_cases=24, n_leads=6, grid=SMALL_GRID, history_days=5, noise_sigma=0.05)
    base.update(kw)
    return gridio.SyntheticConfig(**base)
