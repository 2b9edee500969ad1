import numpy as np
import pytest

from evidence3.imgcore import uniform_image


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def red():
    return uniform_image(16, 16, (1.0, 0.0, 0.0))


@pytest.fixture
def random_image(rng):
    return rng.random((32, 32, 3))
