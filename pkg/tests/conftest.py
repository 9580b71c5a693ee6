import numpy as np
import pytest
import torch

from imlkit.images import ImageTensor, random_photo


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def photo(rng):
    return random_photo(rng, 128, 128)


def make_photos(seed, count, side=128):
    r = np.random.default_rng(seed)
    return [random_photo(r, side, side) for _ in range(count)]


def noisy_image(rng, height, width):
    """Fully textured image: no two patches are alike."""
    data = rng.uniform(0.05, 0.95, size=(3, height, width)).astype(np.float32)
    return ImageTensor(data)
