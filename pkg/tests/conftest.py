import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from corpus import random_images, scene_corpus  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def master():
    return bytes(range(32))


@pytest.fixture(scope="session")
def scenes():
    return scene_corpus(8, seed=3)


@pytest.fixture(scope="session")
def small_images():
    return random_images(12, seed=5)


@pytest.fixture(scope="session")
def photo():
    return scene_corpus(1, seed=11)[0]
