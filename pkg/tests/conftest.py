import numpy as np
import pytest

from simembed.dataset import Dataset, DatasetItem


def tiny_image(rng: np.random.Generator, channels: int = 1,
               size: int = 8) -> np.ndarray:
    return rng.uniform(0.0, 1.0, (channels, size, size)).astype(np.float32)


def grid_dataset(n_classes: int = 3, per_class: int = 4, size: int = 8,
                 seed: int = 0) -> Dataset:
    """Small labeled dataset with deterministic pseudo-random images."""
    rng = np.random.default_rng(seed)
    items = []
    for c in range(n_classes):
        for j in range(per_class):
            items.append(DatasetItem(f"c{c}i{j}", tiny_image(rng, size=size),
                                     c))
    return Dataset(tuple(items))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def small_dataset() -> Dataset:
    return grid_dataset()
