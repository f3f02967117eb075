import numpy as np
import pytest

from augat.imagecore import DTYPE, RngStream


@pytest.fixture
def rng():
    return RngStream(1234, 0)


def random_image(seed, h=8, w=8, c=3):
    g = np.random.default_rng(seed)
    return g.random((h, w, c)).astype(DTYPE)
