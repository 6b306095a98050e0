import numpy as np
import pytest
from hypothesis import settings

from mflq import decompose, example_model

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")


@pytest.fixture
def example_dm():
    return decompose(example_model())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
