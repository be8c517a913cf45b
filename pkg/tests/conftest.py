import numpy as np
import pytest

from pianocover.remi_codec import build_vocabulary


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
