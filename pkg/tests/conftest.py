import numpy as np
import pytest

from decfusion.world import load_map


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def open5():
    return load_map(".....\n.....\n.....\n.....\n.....\n")
