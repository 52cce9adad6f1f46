"""Feature-map and weight containers, the convolution oracle and host-side tensor plumbing.

Feature maps are stored as int8 arrays of shape (Y, Z, X): slice-major, then row, then
pixel, which is also the on-disk order of the FMAP file format. Weights are stored as
integer arrays of shape (K, K, Z, O) indexed ``[j][i][z][o]``.
"""

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from loguru import logger

from blmac_sim.errors import ConfigurationError, FormatError
from blmac_sim.models import ScaleParams

FMAP_MAGIC = b"FMAP"
FMAP_HEADER = struct.Struct("<4sIII")

PIXEL_MIN = -128
PIXEL_MAX = 127


@dataclass(frozen=True)
class FeatureMap:
    """A [X, Y, Z] map of signed 8-bit pixels."""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ConfigurationError(f"feature map must be 3-dimensional, got shape {self.data.shape}")
        if self.data.dtype != np.int8:
            raise ConfigurationError(f"feature map pixels must be int8, got {self.data.dtype}")

    @classmethod
    def zeros(cls, dims_x: int, dims_y: int, dims_z: int) -> "FeatureMap":
        return cls(np.zeros((dims_y, dims_z, dims_x), dtype=np.int8))

    @classmethod
    def from_xyz(cls, values: np.ndarray) -> "FeatureMap":
        """Build a map from an array indexed (x, y, z); values must already fit in 8 bits."""
        values = np.asarray(values)
        if values.min(initial=0) < PIXEL_MIN or values.max(initial=0) > PIXEL_MAX:
            raise ConfigurationError("pixel values must lie in [-128, 127]")
        return cls(np.ascontiguousarray(values.transpose(1, 2, 0)).astype(np.int8))

    @property
    def dims_x(self) -> int:
        return self.data.shape[2]

    @property
    def dims_y(self) -> int:
        return self.data.shape[0]

    @property
    def dims_z(self) -> int:
        return self.data.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.dims_x, self.dims_y, self.dims_z)

    @property
    def nbytes(self) -> int:
        return self.dims_x * self.dims_y * self.dims_z

    def pixel(self, x: int, y: int, z: int) -> int:
        return int(self.data[y, z, x])

    def slice(self, y: int) -> np.ndarray:
        """Z rows of X pixels sharing one y coordinate."""
        return self.data[y]

    def to_xyz(self) -> np.ndarray:
        return self.data.transpose(2, 0, 1)

    def to_bytes(self) -> bytes:
        return FMAP_HEADER.pack(FMAP_MAGIC, self.dims_x, self.dims_y, self.dims_z) + self.data.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FeatureMap":
        if len(blob) < FMAP_HEADER.size:
            raise FormatError("feature map file shorter than its header", {"size": len(blob)})
        magic, dims_x, dims_y, dims_z = FMAP_HEADER.unpack_from(blob)
        if magic != FMAP_MAGIC:
            raise FormatError(f"bad feature map magic {magic!r}")
        expected = dims_x * dims_y * dims_z
        body = blob[FMAP_HEADER.size :]
        if len(body) != expected:
            raise FormatError(f"feature map body holds {len(body)} bytes, header declares {expected}", {"dims": (dims_x, dims_y, dims_z)})
        data = np.frombuffer(body, dtype=np.int8).reshape(dims_y, dims_z, dims_x).copy()
        return cls(data)

    def save(self, path: str | Path) -> None:
        atomic_write(Path(path), self.to_bytes())
        logger.info(f"Wrote feature map {self.dims} to {path}")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureMap":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class QuantizedWeightTensor:
    """Integer kernel W[j][i][z][o] with per-output biases.

    ``frac_bits`` records the scaling of a uniformly quantized tensor: the float
    weight is ``W / 2**frac_bits``.
    """

    weights: np.ndarray
    biases: np.ndarray
    frac_bits: int = 0
    stride_x: int = field(default=1)
    stride_y: int = field(default=1)

    def __post_init__(self) -> None:
        if self.weights.ndim != 4 or self.weights.shape[0] != self.weights.shape[1]:
            raise ConfigurationError(f"weights must have shape (K, K, Z, O), got {self.weights.shape}")
        if self.k != 1 and self.k % 2 == 0:
            raise ConfigurationError(f"kernel size must be odd or 1, got {self.k}")
        if self.biases.shape != (self.o,):
            raise ConfigurationError(f"expected {self.o} biases, got shape {self.biases.shape}")
        if self.stride_x != 1 or self.stride_y != 1:
            raise ConfigurationError("only unit strides are supported")

    @classmethod
    def from_arrays(cls, weights, biases=None, frac_bits: int = 0) -> "QuantizedWeightTensor":
        weights = np.asarray(weights, dtype=np.int64)
        if biases is None:
            biases = np.zeros(weights.shape[3], dtype=np.int64)
        return cls(weights, np.asarray(biases, dtype=np.int64), frac_bits)

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def z(self) -> int:
        return self.weights.shape[2]

    @property
    def o(self) -> int:
        return self.weights.shape[3]

    def column(self, o: int) -> np.ndarray:
        """All K*K*Z weights of output ``o`` as a (K, K, Z) array indexed [j][i][z]."""
        return self.weights[:, :, :, o]


def atomic_write(path: Path, payload: bytes) -> None:
    """Write a file through a temporary sibling and a rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


def conv2d_reference(fmap: FeatureMap, w: QuantizedWeightTensor) -> np.ndarray:
    """Direct evaluation of the convolution sum with zero padding.

    Returns the accumulator map as int64 of shape (Y, O, X), bias included.
    No sparsity logic is applied: every (j, i, z) term is visited.
    """
    if fmap.dims_z != w.z:
        raise ConfigurationError(f"input has {fmap.dims_z} channels, kernel expects {w.z}", {"input_dims": fmap.dims, "kernel_z": w.z})
    k, half = w.k, w.k // 2
    dims_x, dims_y = fmap.dims_x, fmap.dims_y
    padded = np.zeros((dims_y + 2 * half, fmap.dims_z, dims_x + 2 * half), dtype=np.int64)
    padded[half : half + dims_y, :, half : half + dims_x] = fmap.data
    acc = np.zeros((dims_y, w.o, dims_x), dtype=np.int64)
    weights = w.weights.astype(np.int64)
    for i in range(k):
        for j in range(k):
            window = padded[i : i + dims_y, :, j : j + dims_x]
            acc += np.einsum("yzx,zo->yox", window, weights[j, i])
    acc += w.biases.astype(np.int64)[None, :, None]
    return acc


def apply_bias_activation_scale(acc, bias, params: ScaleParams):
    """Add the bias, apply leaky ReLU and rescale to 8 bits.

    Works element-wise on scalars or arrays. Rounding is half away from zero and the
    result saturates to [-128, 127].
    """
    scalar = np.isscalar(acc) and np.isscalar(bias)
    v = np.asarray(acc, dtype=np.int64) + np.asarray(bias, dtype=np.int64)
    if params.activation == "leaky":
        v = np.where(v < 0, (v * params.leaky_num) >> params.leaky_shift, v)
    product = v * params.out_mult
    if params.out_shift:
        half = np.int64(1) << (params.out_shift - 1)
        magnitude = (np.abs(product) + half) >> params.out_shift
        product = np.where(product < 0, -magnitude, magnitude)
    result = np.clip(product, PIXEL_MIN, PIXEL_MAX).astype(np.int8)
    return int(result) if scalar else result


def scale_accumulators(acc: np.ndarray, biases: np.ndarray, params: ScaleParams) -> FeatureMap:
    """Run the scale stage over a (Y, O, X) accumulator map (biases not yet added)."""
    return FeatureMap(apply_bias_activation_scale(acc, np.asarray(biases)[None, :, None], params))


def maxpool2x2(fmap: FeatureMap, stride: int) -> FeatureMap:
    """2x2 max pooling with stride 2 (halving X and Y) or stride 1 (edge-replicated)."""
    data = fmap.data
    if stride == 2:
        y2, x2 = fmap.dims_y // 2, fmap.dims_x // 2
        blocks = data[: 2 * y2, :, : 2 * x2].reshape(y2, 2, fmap.dims_z, x2, 2)
        return FeatureMap(np.ascontiguousarray(blocks.max(axis=(1, 4))))
    if stride == 1:
        padded = np.pad(data, ((0, 1), (0, 0), (0, 1)), mode="edge")
        pooled = np.maximum.reduce(
            [
                padded[:-1, :, :-1],
                padded[:-1, :, 1:],
                padded[1:, :, :-1],
                padded[1:, :, 1:],
            ]
        )
        return FeatureMap(np.ascontiguousarray(pooled))
    raise ConfigurationError(f"maxpool stride must be 1 or 2, got {stride}")


def macs_per_kernel(k: int, z: int, o: int) -> int:
    """Multiply-accumulates needed to produce one output column."""
    if min(k, z, o) < 1:
        raise ConfigurationError(f"kernel dimensions must be positive, got {(k, z, o)}")
    return k * k * z * o


def round_half_away(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def quantize_weights_uniform(float_weights, frac_bits: int, biases=None, weight_bits: int = 8, bias_bits: int = 24) -> QuantizedWeightTensor:
    """Quantize float weights as ``round(W * 2**frac_bits)``, saturating to ``weight_bits``.

    Biases, if given, are quantized at the same scale into ``bias_bits`` so they can be
    added straight to the accumulators.
    """
    if frac_bits < 0:
        raise ConfigurationError(f"frac_bits must be non-negative, got {frac_bits}")
    scale = float(1 << frac_bits)
    w_lim = 1 << (weight_bits - 1)
    weights = np.clip(round_half_away(np.asarray(float_weights) * scale), -w_lim, w_lim - 1).astype(np.int64)
    if weights.ndim != 4:
        raise ConfigurationError(f"float weights must have shape (K, K, Z, O), got {weights.shape}")
    if biases is None:
        q_biases = np.zeros(weights.shape[3], dtype=np.int64)
    else:
        b_lim = 1 << (bias_bits - 1)
        q_biases = np.clip(round_half_away(np.asarray(biases) * scale), -b_lim, b_lim - 1).astype(np.int64)
    return QuantizedWeightTensor(weights, q_biases, frac_bits)


def quantize_value(value: float, frac_bits: int, weight_bits: int = 8) -> int:
    """Scalar form of the uniform quantizer."""
    lim = 1 << (weight_bits - 1)
    return int(np.clip(round_half_away(value * (1 << frac_bits)), -lim, lim - 1))


def upsample2x(fmap: FeatureMap) -> FeatureMap:
    """Nearest-neighbour 2x upsampling in X and Y."""
    return FeatureMap(np.ascontiguousarray(fmap.data.repeat(2, axis=0).repeat(2, axis=2)))


def concat_z(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    """Channel-wise concatenation; ``a``'s channels come first."""
    if (a.dims_x, a.dims_y) != (b.dims_x, b.dims_y):
        raise ConfigurationError(f"cannot concatenate maps of dims {a.dims} and {b.dims}")
    return FeatureMap(np.concatenate([a.data, b.data], axis=1))
