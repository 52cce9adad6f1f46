"""Canonical signed-digit recoding, bit-layer plans and floating-point BLMAC statistics.

A BLMAC multiplies by a weight one signed digit at a time, so its cost is the number
of nonzero trits. Weights are recoded into canonical signed digit (non-adjacent) form,
which minimizes that count, then regrouped per bit layer across a whole kernel column.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from loguru import logger

from blmac_sim.config import FLOAT_FORMATS, PUBLISHED_FP_CYCLES
from blmac_sim.errors import ConfigurationError
from blmac_sim.runlength import FlattenOrder, RunSymbol, flatten_tensor, layer_positions, rle_encode_positions
from blmac_sim.tensor import QuantizedWeightTensor

CSD_LIMIT = 1 << 30
EXHAUSTIVE_FRAC_BITS = 16


@dataclass(frozen=True)
class SignedDigitVector:
    """Nonzero digits (layer_index, sign) of an integer, most significant first."""

    digits: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.digits)

    @property
    def value(self) -> int:
        return sum(sign << layer if sign > 0 else -(1 << layer) for layer, sign in self.digits)


def csd_decompose(w: int) -> SignedDigitVector:
    """Recode ``w`` into canonical signed digit form."""
    w = int(w)
    if abs(w) >= CSD_LIMIT:
        raise ConfigurationError(f"|w| must be below 2^30, got {w}")
    digits = []
    layer = 0
    while w:
        if w & 1:
            digit = 2 - (w & 3)  # +1 when w = 1 (mod 4), -1 when w = 3 (mod 4)
            digits.append((layer, digit))
            w -= digit
        w >>= 1
        layer += 1
    return SignedDigitVector(tuple(reversed(digits)))


def csd_masks(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bit masks of the +1 and -1 digits of the CSD form of every element of ``values``."""
    values = np.asarray(values, dtype=np.int64)
    magnitude = np.abs(values)
    half = magnitude >> 1
    triple = magnitude + half
    changed = half ^ triple
    plus = triple & changed
    minus = half & changed
    negative = values < 0
    return np.where(negative, minus, plus), np.where(negative, plus, minus)


def csd_weight(w: int) -> int:
    """Nonzero digit count of the CSD form of ``w``."""
    magnitude = abs(int(w))
    return ((3 * magnitude) ^ magnitude).bit_count()


@dataclass(frozen=True)
class BitLayerPlan:
    """Run lists of one kernel column, one per bit layer, most significant layer first."""

    o: int
    n_b: int
    layers: tuple[tuple[RunSymbol, ...], ...]
    flatten_len: int
    order: FlattenOrder = FlattenOrder.IZJ

    def __post_init__(self) -> None:
        if len(self.layers) != self.n_b:
            raise ConfigurationError(f"plan for o={self.o} declares N_b={self.n_b} but holds {len(self.layers)} layers")

    @property
    def n3(self) -> int:
        return count_nonzero_trits(self)

    @property
    def decode_steps(self) -> int:
        """One step per RUN and one per EOR."""
        return self.n3 + self.n_b

    def layer_index(self, position: int) -> int:
        """Power of two carried by ``layers[position]``."""
        return self.n_b - 1 - position


def _plan_from_masks(o: int, plus: np.ndarray, minus: np.ndarray, n_b: int, order: FlattenOrder) -> BitLayerPlan:
    layers = []
    for layer in range(n_b - 1, -1, -1):
        plus_bits = (plus >> layer) & 1
        minus_bits = (minus >> layer) & 1
        positions = np.flatnonzero(plus_bits | minus_bits)
        signs = np.where(plus_bits[positions] == 1, 1, -1)
        layers.append(tuple(rle_encode_positions(positions, signs)))
    return BitLayerPlan(o=o, n_b=n_b, layers=tuple(layers), flatten_len=int(plus.size), order=order)


def required_layers(values: np.ndarray) -> int:
    """N_b needed for ``values``: one more than the highest CSD layer, at least 1."""
    plus, minus = csd_masks(values)
    top = int(np.bitwise_or.reduce(np.ravel(plus | minus), initial=0))
    return max(1, top.bit_length())


def build_layer_plan(w: QuantizedWeightTensor, o: int, order: FlattenOrder = FlattenOrder.IZJ, n_b: int | None = None) -> BitLayerPlan:
    """Build the bit-layer plan of output column ``o``.

    ``n_b`` defaults to what the column itself needs; a layer-wide value may be passed
    so every column of a layer shares the same count.
    """
    if not 0 <= o < w.o:
        raise ConfigurationError(f"output index {o} out of range [0, {w.o})")
    column = flatten_tensor(w.weights[:, :, :, o : o + 1], order)[:, 0]
    if np.abs(column).max(initial=0) >= CSD_LIMIT:
        raise ConfigurationError("weights must stay below 2^30 in magnitude")
    needed = required_layers(column)
    if n_b is None:
        n_b = needed
    elif n_b < needed:
        raise ConfigurationError(f"column {o} needs {needed} bit layers, {n_b} requested", {"o": o})
    plus, minus = csd_masks(column)
    return _plan_from_masks(o, plus, minus, n_b, order)


def build_layer_plans(w: QuantizedWeightTensor, order: FlattenOrder = FlattenOrder.IZJ) -> list[BitLayerPlan]:
    """Plans for every column of a layer, sharing the layer-wide N_b."""
    flat = flatten_tensor(w.weights, order)
    if np.abs(flat).max(initial=0) >= CSD_LIMIT:
        raise ConfigurationError("weights must stay below 2^30 in magnitude")
    n_b = required_layers(flat)
    plus, minus = csd_masks(flat)
    plans = [_plan_from_masks(o, plus[:, o], minus[:, o], n_b, order) for o in range(w.o)]
    logger.debug(f"Built {len(plans)} bit-layer plans with N_b={n_b}, N_3 total {sum(p.n3 for p in plans)}")
    return plans


def count_nonzero_trits(plan: BitLayerPlan) -> int:
    """N_3: number of (ZRUN, sign) events over all layers of ``plan``."""
    return sum(1 for layer in plan.layers for symbol in layer if not symbol.is_eor)


def expand_plan(plan: BitLayerPlan) -> np.ndarray:
    """Reconstruct the flattened integer column a plan encodes."""
    column = np.zeros(plan.flatten_len, dtype=np.int64)
    for index, layer in enumerate(plan.layers):
        positions, signs = layer_positions(layer)
        column[positions] += signs << plan.layer_index(index)
    return column


# --- Floating-point weights ---


@dataclass(frozen=True)
class FloatFormat:
    name: str
    exp_bits: int
    frac_bits: int
    bias: int

    @property
    def exp_max(self) -> int:
        return (1 << self.exp_bits) - 1


FP_FORMATS = {name: FloatFormat(name=name, **fields) for name, fields in FLOAT_FORMATS.items()}


def fp_weight_to_integer(sign: int, exponent: int, fraction: int, fmt: FloatFormat) -> tuple[int, int]:
    """Decode one floating-point weight as ``m * 2**scale_exp`` with an integer mantissa.

    The mantissa includes the implicit leading one. Zero decodes to ``(0, 0)``;
    NaN, infinities and subnormals are rejected.
    """
    if sign not in (0, 1) or not 0 <= exponent <= fmt.exp_max or not 0 <= fraction < (1 << fmt.frac_bits):
        raise ConfigurationError(f"fields ({sign}, {exponent}, {fraction}) out of range for {fmt.name}")
    if exponent == fmt.exp_max:
        raise ConfigurationError(f"NaN/Inf encoding rejected for {fmt.name}", {"exponent": exponent, "fraction": fraction})
    if exponent == 0:
        if fraction:
            raise ConfigurationError(f"subnormal {fmt.name} values are not supported")
        return 0, 0
    mantissa = (1 << fmt.frac_bits) + fraction
    return (-mantissa if sign else mantissa), exponent - fmt.bias - fmt.frac_bits


def _round_float32_bits(bits: np.ndarray, drop: int) -> np.ndarray:
    """Round float32 bit patterns to ``23 - drop`` fraction bits, nearest-even."""
    if drop == 0:
        return bits
    lsb = (bits >> drop) & 1
    rounded = bits + ((1 << (drop - 1)) - 1) + lsb
    return (rounded >> drop) << drop


def encode_floats(values, fmt: FloatFormat) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split ``values`` into (sign, exponent, fraction) fields of ``fmt``."""
    values = np.asarray(values)
    if fmt.exp_bits == 5:
        bits = values.astype(np.float16).view(np.uint16).astype(np.int64)
    elif fmt.exp_bits == 8:
        bits32 = values.astype(np.float32).view(np.uint32).astype(np.int64)
        drop = 23 - fmt.frac_bits
        bits = _round_float32_bits(bits32, drop) >> drop
    else:
        raise ConfigurationError(f"unsupported float format {fmt.name}")
    width = 1 + fmt.exp_bits + fmt.frac_bits
    sign = (bits >> (width - 1)) & 1
    exponent = (bits >> fmt.frac_bits) & fmt.exp_max
    fraction = bits & ((1 << fmt.frac_bits) - 1)
    return sign, exponent, fraction


def fp_weights_to_integers(values, fmt: FloatFormat) -> tuple[np.ndarray, int]:
    """Convert floating-point weights to integers sharing one power-of-two scale.

    Alignment only shifts mantissas (moving their digits to higher layers); it never
    changes a weight's nonzero digit count.
    """
    values = np.asarray(values)
    signs, exponents, fractions = encode_floats(values, fmt)
    decoded = [fp_weight_to_integer(int(s), int(e), int(f), fmt) for s, e, f in zip(signs.ravel(), exponents.ravel(), fractions.ravel(), strict=True)]
    scales = [scale for mantissa, scale in decoded if mantissa]
    if not scales:
        return np.zeros(values.shape, dtype=np.int64), 0
    common = min(scales)
    aligned = [mantissa << (scale - common) if mantissa else 0 for mantissa, scale in decoded]
    if max(abs(a) for a in aligned) >= CSD_LIMIT:
        raise ConfigurationError(f"weights span too many binades to align below 2^30 ({fmt.name})")
    return np.asarray(aligned, dtype=np.int64).reshape(values.shape), common


def _exhaustive_digit_total(frac_bits: int, hidden_bit: bool) -> int:
    base = 1 << frac_bits if hidden_bit else 0
    return sum(len(csd_decompose(base + fraction)) for fraction in range(1 << frac_bits))


def _dp_digit_total(frac_bits: int, hidden_bit: bool) -> int:
    """Total CSD weight over all mantissas, by dynamic programming over the bits of 3m.

    The CSD weight of m equals popcount(3m XOR m); the DP walks the bits of m from the
    least significant one, carrying (previous bit of m, carry of m + 2m).
    """
    states: dict[tuple[int, int], tuple[int, int]] = {(0, 0): (1, 0)}
    free_bits = [(0, 1)] * frac_bits
    fixed_bits = [(1,)] if hidden_bit else [(0,)]
    for choices in free_bits + fixed_bits + [(0,), (0,)]:
        updated: dict[tuple[int, int], tuple[int, int]] = {}
        for (previous, carry), (count, total) in states.items():
            for bit in choices:
                s = bit + previous + carry
                flip = (s & 1) ^ bit
                key = (bit, s >> 1)
                old_count, old_total = updated.get(key, (0, 0))
                updated[key] = (old_count + count, old_total + total + flip * count)
        states = updated
    return sum(total for _, total in states.values())


def expected_fp_blmac_cycles(frac_bits: int, hidden_bit: bool = True) -> Fraction:
    """Average nonzero-digit count of a floating-point mantissa with a uniform fraction.

    Exhaustive for ``frac_bits <= 16``, exact dynamic programming above.
    """
    if not 0 <= frac_bits <= 24:
        raise ConfigurationError(f"frac_bits must lie in [0, 24], got {frac_bits}")
    if frac_bits <= EXHAUSTIVE_FRAC_BITS:
        total = _exhaustive_digit_total(frac_bits, hidden_bit)
    else:
        total = _dp_digit_total(frac_bits, hidden_bit)
    return Fraction(total, 1 << frac_bits)


def fp_cycle_rows(hidden_bit: bool = True) -> list[dict]:
    """Average BLMAC cycles per floating-point multiply/accumulate for each known format."""
    return [
        {
            "format": fmt.name,
            "exp_bits": fmt.exp_bits,
            "frac_bits": fmt.frac_bits,
            "cycles": float(expected_fp_blmac_cycles(fmt.frac_bits, hidden_bit)),
            "published": PUBLISHED_FP_CYCLES[fmt.name],
        }
        for fmt in FP_FORMATS.values()
    ]
