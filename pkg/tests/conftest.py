import numpy as np
import pytest

from rawkit.model import BayerPattern, IspParams, RawImage


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_raw(rng, h2=8, w2=8, bit_depth=10, black=64, white=1023,
             pattern=BayerPattern.RGGB, lo=None, hi=None):
    """Random packed frame with samples spanning [lo, hi]."""
    if lo is None:
        lo = 0
    if hi is None:
        hi = (1 << bit_depth) - 1
    data = rng.integers(lo, hi + 1, size=(h2, w2, 4), dtype=np.uint16)
    return RawImage(data, bit_depth, black, white, pattern)


@pytest.fixture
def small_raw(rng):
    return make_raw(rng)


@pytest.fixture
def identity_params():
    return IspParams.identity()
