import numpy as np
import pytest
from hypothesis import settings

from dyadtb.lattice import Lattice
from dyadtb.measure import Measure

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_measure(lat: Lattice, rng: np.random.Generator, lo: float = 0.1) -> Measure:
    w = rng.uniform(lo, 1.0, lat.num_leaves)
    return Measure(lat, w / w.sum())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
