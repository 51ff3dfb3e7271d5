import numpy as np
import pytest

from featprobe.imageops import Image


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_image(rng, height=32, width=32) -> Image:
    return Image(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


def constant_image(value, height=32, width=32) -> Image:
    arr = np.empty((height, width, 3), dtype=np.uint8)
    arr[:] = np.asarray(value, dtype=np.uint8)
    return Image(arr)
