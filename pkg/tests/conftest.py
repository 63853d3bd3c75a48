import numpy as np
import pytest

from fedtune.federated import generate_population, oracle_population
from fedtune.space import default_space
from fedtune.surrogate import SurrogateWorkload, make_surrogate


@pytest.fixture
def space():
    return default_space()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_population():
    return generate_population(n_train=40, n_val=20, n_classes=5, dim=6, alpha=1.0, samples_per_client=30, seed=3)


@pytest.fixture(scope="session")
def oracle():
    return oracle_population(seed=0)


@pytest.fixture
def surrogate_workload():
    return SurrogateWorkload(make_surrogate(default_space(), n_val=100, seed=1))
