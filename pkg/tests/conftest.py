import numpy as np
import pytest
from hypothesis import settings

from retouch.image import ImageBuffer

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_image(seed: int, height: int = 8, width: int = 8, lo: float = 0.0, hi: float = 1.0) -> ImageBuffer:
    rng = np.random.default_rng(seed)
    return ImageBuffer(rng.uniform(lo, hi, size=(height, width, 3)))


def srgb8_image(seed: int, height: int = 8, width: int = 8) -> ImageBuffer:
    rng = np.random.default_rng(seed)
    return ImageBuffer.from_srgb8(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


@pytest.fixture
def rand_img():
    return random_image
