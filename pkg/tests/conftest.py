import numpy as np
import pytest

from dgp_mcem.mcem import Dataset, McemConfig, TPrior
from dgp_mcem.simstudy import SyntheticSpec, generate_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-size reproduction tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def small_dataset():
    x, y = generate_dataset(SyntheticSpec(n=30, seed=3), 0)
    return Dataset.from_arrays(x, y, label="small")


@pytest.fixture
def quick_config():
    """MCEM settings small enough for the default test run."""
    return McemConfig(
        D=300,
        J=60,
        max_iter=15,
        final_draws=400,
        burn_in=100,
        thin=1,
        t_prior=TPrior(domain=(0.0, 2.0)),
        seed=11,
    )
