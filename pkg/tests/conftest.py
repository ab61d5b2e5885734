import numpy as np
import pytest

from chapterbank.config import preset
from chapterbank.tensor import Tensor


def rand_tensor(shape, seed=0, scale=1.0, requires_grad=False):
    gen = np.random.default_rng(seed)
    return Tensor(gen.standard_normal(shape) * scale, requires_grad=requires_grad)


@pytest.fixture
def micro_cfg():
    return preset("micro")
