import numpy as np
import pytest

from mmadapt import tensorgrad

tensorgrad.set_debug(True)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
