import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from branchkit import autodiff as ad

# the default profile is derandomized so every run sees the same examples;
# BRANCHKIT_HYPOTHESIS=stress explores many more, freshly drawn each time
settings.register_profile(
    "branchkit", deadline=None, max_examples=60, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile(
    "stress", deadline=None, max_examples=2000, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("BRANCHKIT_HYPOTHESIS", "branchkit"))


@pytest.fixture(autouse=True)
def _fresh_tape():
    ad.reset_tape()
    yield
    ad.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
