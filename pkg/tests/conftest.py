import os

import hypothesis
import numpy as np
import pytest

from helpers import small_flow
from src.numerics import SeededRng

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=25, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def identity_flow():
    """Freshly initialised flow: the coupling stack is the identity map, L = 2."""
    return small_flow()


@pytest.fixture
def random_flow():
    return small_flow(seed=7, scale=0.4)
