"""Test fixtures for the blmac-sim tests."""

import numpy as np
import pytest

from blmac_sim.tensor import FeatureMap, QuantizedWeightTensor
from tests.helpers import random_fmap, sparse_weights


@pytest.fixture
def rng():
    """Seeded generator so every test run draws the same cases."""
    return np.random.default_rng(20240417)


@pytest.fixture
def small_layer(rng) -> tuple[FeatureMap, QuantizedWeightTensor]:
    """8x8x4 input and a 3x3 kernel with 4 outputs at 70% sparsity."""
    fmap = random_fmap(rng, 8, 8, 4)
    w = sparse_weights(rng, k=3, z=4, o=4, sparsity=0.7)
    return fmap, w


@pytest.fixture
def tmp_workspace(tmp_path):
    """Directory layout used by the command-line tests."""
    for name in ("streams", "out"):
        (tmp_path / name).mkdir()
    return tmp_path
