import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ivforest.forest import TreeParams
from ivforest.synth import DgpSpec, generate

settings.register_profile(
    "default", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
settings.load_profile("default")


@pytest.fixture(scope="session")
def step_data():
    frame, truth = generate(DgpSpec(n=1500, p=4, tau="step", seed=11))
    return frame, truth


@pytest.fixture(scope="session")
def small_params():
    return TreeParams(n_trees=40, seed=3, min_node_size=5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
