"""Shared fixtures"""
import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from bags.tensor import set_default_dtype
from tests.oracles import front_camera, random_cloud


@pytest.fixture(autouse=True)
def float64():
    """Every test starts (and leaves) the engine at 64-bit"""
    set_default_dtype("float64")
    yield
    set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_scene(rng):
    """20 Gaussians in front of a 16 x 16 camera"""
    return random_cloud(rng, 20), front_camera(16)
