import hypothesis
import numpy as np
import pytest

from rpbandit.core import make_rng

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")

np.seterr(all="raise", under="ignore")


@pytest.fixture
def rng():
    return make_rng(1234, "test")
