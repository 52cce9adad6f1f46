"""Helper utilities for blmac-sim tests."""

import numpy as np

from blmac_sim.models import ScaleParams
from blmac_sim.tensor import FeatureMap, QuantizedWeightTensor

UNIT_LINEAR = ScaleParams(activation="linear")


def random_fmap(rng: np.random.Generator, x: int, y: int, z: int, low: int = -128, high: int = 127) -> FeatureMap:
    """Random map of dims (x, y, z) with pixels in [low, high]."""
    return FeatureMap(rng.integers(low, high + 1, size=(y, z, x), dtype=np.int8))


def sparse_weights(
    rng: np.random.Generator,
    k: int,
    z: int,
    o: int,
    sparsity: float = 0.5,
    limit: int = 127,
    bias_limit: int = 1000,
) -> QuantizedWeightTensor:
    """Integer kernel with roughly ``sparsity`` zeros and weights in [-limit, limit]."""
    weights = rng.integers(-limit, limit + 1, size=(k, k, z, o))
    weights[rng.random(weights.shape) < sparsity] = 0
    biases = rng.integers(-bias_limit, bias_limit + 1, size=o)
    return QuantizedWeightTensor.from_arrays(weights, biases)


def column_tensor(values, k: int = 1) -> QuantizedWeightTensor:
    """Single-output tensor whose flattened column (IZJ order, K=1) is ``values``."""
    values = np.asarray(values, dtype=np.int64)
    return QuantizedWeightTensor.from_arrays(values.reshape(k, k, -1, 1))


def identity_tensor(z: int = 1) -> QuantizedWeightTensor:
    weights = np.zeros((1, 1, z, z), dtype=np.int64)
    for channel in range(z):
        weights[0, 0, channel, channel] = 1
    return QuantizedWeightTensor.from_arrays(weights)
