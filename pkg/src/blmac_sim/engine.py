"""Processor model: slice buffer, MAC and BLMAC processing elements, tile groups and the scale back end.

A layer is streamed slice by slice. The slice buffer holds K+1 slices; slots 0..K-1 feed the
processing elements while the next input slice is written into slot K. After every output
slice the buffer rotates by moving its base pointer. Output columns are split round-robin
among tile groups; every group owns a private accumulator array.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from loguru import logger

from blmac_sim.codec import CompressedWeightStream, ac_decode
from blmac_sim.config import DEFAULT_GROUP_WIDTHS
from blmac_sim.errors import AccumulatorOverflowError, ConfigurationError, ProtocolError
from blmac_sim.models import EngineOptions, OverheadParams, ScaleParams
from blmac_sim.runlength import FlattenOrder, flatten_tensor, layer_positions
from blmac_sim.signed_digit import BitLayerPlan
from blmac_sim.tensor import FeatureMap, QuantizedWeightTensor, apply_bias_activation_scale, conv2d_reference, maxpool2x2, scale_accumulators


class SliceMarker(Enum):
    VIRTUAL_ZERO = "virtual_zero"


VIRTUAL_ZERO = SliceMarker.VIRTUAL_ZERO


class SliceBuffer:
    """K+1 slots of Z rows of X pixels, addressed through a rotating base pointer."""

    def __init__(self, k: int, z_dim: int, width: int):
        if k < 1 or z_dim < 1 or width < 1:
            raise ConfigurationError(f"slice buffer dimensions must be positive, got K={k} Z={z_dim} X={width}")
        self.k = k
        self.z_dim = z_dim
        self.width = width
        self.slots = np.zeros((k + 1, z_dim, width), dtype=np.int8)
        self.virtual = [True] * (k + 1)
        self.base = 0
        self._slot_k_free = True
        self.resident_pixels = 0
        self.peak_resident_pixels = 0

    def _physical(self, slot: int) -> int:
        if not 0 <= slot <= self.k:
            raise ConfigurationError(f"slot {slot} out of range [0, {self.k}]")
        return (self.base + slot) % (self.k + 1)

    def push(self, slice_rows: np.ndarray | SliceMarker) -> None:
        """Store a slice (or an all-zero marker) in logical slot K."""
        if not self._slot_k_free:
            raise ProtocolError("slot K written twice without a rotate", {"base": self.base})
        physical = self._physical(self.k)
        if slice_rows is VIRTUAL_ZERO:
            self.virtual[physical] = True
        else:
            rows = np.asarray(slice_rows)
            if rows.shape != (self.z_dim, self.width):
                raise ConfigurationError(f"slice shape {rows.shape} does not match buffer rows {(self.z_dim, self.width)}")
            self.slots[physical] = rows
            self.virtual[physical] = False
        self._slot_k_free = False
        self.resident_pixels = sum(not v for v in self.virtual) * self.z_dim * self.width
        self.peak_resident_pixels = max(self.peak_resident_pixels, self.resident_pixels)

    def rotate(self) -> None:
        """Logical slot n becomes the former slot n+1; the former slot 0 is the new free slot K."""
        self.base = (self.base + 1) % (self.k + 1)
        self._slot_k_free = True

    def read_slot(self, i: int) -> np.ndarray:
        physical = self._physical(i)
        if self.virtual[physical]:
            return np.zeros((self.z_dim, self.width), dtype=np.int8)
        return self.slots[physical]

    def read_row(self, i: int, z: int) -> np.ndarray:
        if not 0 <= z < self.z_dim:
            raise ConfigurationError(f"channel {z} out of range [0, {self.z_dim})")
        return self.read_slot(i)[z]


def select_window(v: np.ndarray, j: int, k: int) -> np.ndarray:
    """Pixels ``V1[x + j]`` where V1 is ``v`` padded by K/2 zeros on both sides (last axis)."""
    if not 0 <= j < k:
        raise ConfigurationError(f"kernel column {j} out of range [0, {k})")
    half = k // 2
    width = v.shape[-1]
    pad = [(0, 0)] * (v.ndim - 1) + [(half, half)]
    return np.pad(v, pad)[..., j : j + width]


def window_stack(buffer: SliceBuffer, order: FlattenOrder, lanes: int) -> np.ndarray:
    """Every (i, z, j) tap row of the current buffer state, in flatten order, padded to ``lanes`` pixels."""
    k = buffer.k
    rows = np.stack([buffer.read_slot(i) for i in range(k)])
    taps = np.stack([select_window(rows, j, k) for j in range(k)], axis=2)
    if order == FlattenOrder.ZIJ:
        taps = taps.transpose(1, 0, 2, 3)
    flat = taps.reshape(-1, buffer.width).astype(np.int64)
    if lanes > buffer.width:
        flat = np.pad(flat, ((0, 0), (0, lanes - buffer.width)))
    return flat


class _AccumulatorArray:
    """Row of ``width`` accumulators wrapping at ``acc_bits`` two's complement."""

    def __init__(self, width: int, acc_bits: int = 20, exact_check: bool = False):
        self.width = width
        self.acc_bits = acc_bits
        self.acc = np.zeros(width, dtype=np.int64)
        self.exact = np.zeros(width, dtype=object) if exact_check else None
        self.cycles = 0

    def _wrap(self, values: np.ndarray) -> np.ndarray:
        modulus = np.int64(1) << self.acc_bits
        return ((values + (modulus >> 1)) & (modulus - 1)) - (modulus >> 1)

    def _check_width(self, pixels: np.ndarray) -> None:
        if pixels.shape[-1] != self.width:
            raise ConfigurationError(f"row of {pixels.shape[-1]} pixels does not match array width {self.width}")

    def reset(self) -> None:
        self.acc[:] = 0
        if self.exact is not None:
            self.exact[:] = 0

    def _add(self, total: np.ndarray) -> None:
        self.acc = self._wrap(self.acc + total)
        if self.exact is not None:
            self.exact = self.exact + total.astype(object)

    def overflow_lanes(self) -> np.ndarray:
        """Lanes whose exact value does not fit ``acc_bits``; empty unless exact checking is on."""
        if self.exact is None:
            return np.empty(0, dtype=np.int64)
        limit = 1 << (self.acc_bits - 1)
        return np.flatnonzero([not -limit <= int(v) < limit for v in self.exact])


class BlmacArray(_AccumulatorArray):
    """Bit-layer multiply-accumulators: add a row, subtract a row, or double every accumulator."""

    def step(self, pixels: np.ndarray, sign: int) -> None:
        pixels = np.asarray(pixels, dtype=np.int64)
        self._check_width(pixels)
        self._add(sign * pixels)
        self.cycles += 1

    def step_many(self, rows: np.ndarray, signs: np.ndarray) -> None:
        """Apply ``len(signs)`` consecutive steps at once."""
        rows = np.asarray(rows, dtype=np.int64)
        self._check_width(rows)
        self._add(np.asarray(signs, dtype=np.int64) @ rows)
        self.cycles += len(signs)

    def shift(self) -> None:
        self.acc = self._wrap(self.acc * 2)
        if self.exact is not None:
            self.exact = self.exact * 2
        self.cycles += 1

    def end_kernel(self) -> None:
        """Final EOR: the accumulated row goes to the scale unit, no shift."""
        self.cycles += 1


class MacArray(_AccumulatorArray):
    """Multi-bit multiply-accumulators: one weight times a row of pixels per cycle."""

    def step(self, pixels: np.ndarray, weight: int) -> None:
        pixels = np.asarray(pixels, dtype=np.int64)
        self._check_width(pixels)
        self._add(int(weight) * pixels)
        self.cycles += 1

    def step_many(self, rows: np.ndarray, weights: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.int64)
        self._check_width(rows)
        self._add(np.asarray(weights, dtype=np.int64) @ rows)
        self.cycles += len(weights)


@dataclass(frozen=True)
class TileArrangement:
    groups: int
    group_width: int
    array_width: int = 416

    def group_of(self, o: int) -> int:
        return o % self.groups


def arrange_tiles(line_width: int, array_width: int = 416, tile_width: int = 13) -> TileArrangement:
    """Narrowest power-of-two multiple of a tile that covers ``line_width``."""
    if line_width < 1:
        raise ConfigurationError(f"line width must be positive, got {line_width}")
    if array_width % tile_width or (array_width // tile_width) & (array_width // tile_width - 1):
        raise ConfigurationError(f"array width {array_width} is not a power-of-two number of {tile_width}-wide tiles")
    if line_width > array_width:
        raise ConfigurationError(f"line width {line_width} exceeds the {array_width}-wide array; slice tiling is not modeled", {"line_width": line_width})
    if (tile_width, array_width) == (13, 416):
        widths = DEFAULT_GROUP_WIDTHS
    else:
        widths = tuple(tile_width << n for n in range((array_width // tile_width).bit_length()))
    group_width = next(w for w in widths if w >= line_width)
    return TileArrangement(groups=array_width // group_width, group_width=group_width, array_width=array_width)


def kernel_cycles(steps: int, overhead: OverheadParams) -> int:
    """Cycles of one (o, slice) row: its decode or multiply steps plus pipeline overhead."""
    return steps + math.floor(steps * overhead.fraction) + overhead.row_cycles


@dataclass
class LayerRunResult:
    output: FeatureMap
    cycles_per_slice: list[int]
    cycles_map: int
    cycles_per_kernel: int
    decode_steps: int
    peak_resident_pixels: int = 0
    groups: int = 1
    n_b: int = 0
    n3_total: int = 0
    kernel_steps: list[int] = field(default_factory=list)


def _slice_cycles(steps: Sequence[int], arrange: TileArrangement, options: EngineOptions, z_dim: int, width: int) -> tuple[int, int]:
    overhead = OverheadParams.from_options(options)
    per_kernel = [kernel_cycles(s, overhead) for s in steps]
    group_totals = [0] * arrange.groups
    for o, cycles in enumerate(per_kernel):
        group_totals[arrange.group_of(o)] += cycles
    compute = max(group_totals) + overhead.slice_cycles
    if options.mem_bytes_per_cycle > 0:
        compute = max(compute, math.ceil(z_dim * width / options.mem_bytes_per_cycle))
    return compute, sum(per_kernel)


def _measured_cycles(measured: Sequence[Sequence[int]], arrange: TileArrangement, options: EngineOptions, z_dim: int, width: int) -> tuple[list[int], int]:
    """Slice cycles from the per-(slice, output) array counts, plus the kernel cycles of the first slice."""
    per_slice, per_kernel = [], 0
    for y, steps in enumerate(measured):
        cycles, kernel_total = _slice_cycles(steps, arrange, options, z_dim, width)
        per_slice.append(cycles)
        if y == 0:
            per_kernel = kernel_total
    return per_slice, per_kernel


class _ScaleUnit:
    """Scales finished rows and, when fused, max-pools them as slices arrive."""

    def __init__(self, biases: np.ndarray, scale: ScaleParams, pool_stride: int | None):
        self.biases = np.asarray(biases, dtype=np.int64)[:, None]
        self.scale = scale
        self.pool_stride = pool_stride
        self.rows: list[np.ndarray] = []
        self._pending: np.ndarray | None = None

    def _pool(self, slices: list[np.ndarray]) -> np.ndarray:
        return maxpool2x2(FeatureMap(np.stack(slices)), self.pool_stride).data[0]

    def push(self, acc_rows: np.ndarray) -> None:
        scaled = apply_bias_activation_scale(acc_rows, self.biases, self.scale)
        if self.pool_stride is None:
            self.rows.append(scaled)
        elif self._pending is None:
            self._pending = scaled
        else:
            self.rows.append(self._pool([self._pending, scaled]))
            self._pending = None if self.pool_stride == 2 else scaled

    def finish(self, dims_z: int, dims_x: int) -> FeatureMap:
        if self.pool_stride == 1 and self._pending is not None:
            self.rows.append(self._pool([self._pending]))
        self._pending = None
        if not self.rows:
            width = dims_x // 2 if self.pool_stride == 2 else dims_x
            return FeatureMap(np.zeros((0, dims_z, width), dtype=np.int8))
        return FeatureMap(np.ascontiguousarray(np.stack(self.rows)))


def _stream_layer(fmap: FeatureMap, k: int, order: FlattenOrder, arrange: TileArrangement, compute_slice) -> SliceBuffer:
    """Drive the slice buffer through a layer, calling ``compute_slice(y, windows)`` per output slice."""
    half = k // 2
    entries = [VIRTUAL_ZERO] * half + [fmap.slice(y) for y in range(fmap.dims_y)] + [VIRTUAL_ZERO] * half
    buffer = SliceBuffer(k, fmap.dims_z, fmap.dims_x)
    for entry in entries[:k]:
        buffer.push(entry)
        buffer.rotate()
    for y in range(fmap.dims_y):
        if y + k < len(entries):
            buffer.push(entries[y + k])
        compute_slice(y, window_stack(buffer, order, arrange.group_width))
        buffer.rotate()
    return buffer


def _check_layer(fmap: FeatureMap, k: int, z_dim: int, o_dim: int, biases: np.ndarray, arrange: TileArrangement) -> None:
    if k % 2 == 0:
        raise ConfigurationError(f"kernel size must be odd, got {k}")
    if fmap.dims_z != z_dim:
        raise ConfigurationError(f"input has {fmap.dims_z} channels, kernel expects {z_dim}", {"input_dims": fmap.dims})
    if fmap.dims_x > arrange.group_width:
        raise ConfigurationError(f"line width {fmap.dims_x} exceeds group width {arrange.group_width}")
    if np.asarray(biases).shape != (o_dim,):
        raise ConfigurationError(f"expected {o_dim} biases, got shape {np.asarray(biases).shape}")


def _raise_overflow(lanes: np.ndarray, width: int, y: int, o: int, acc_bits: int) -> None:
    lanes = lanes[lanes < width]
    if lanes.size:
        x = int(lanes[0])
        raise AccumulatorOverflowError(f"accumulator overflow at x={x} y={y} o={o} beyond {acc_bits} bits", {"x": x, "y": y, "o": o})


def run_layer_plans(
    fmap: FeatureMap,
    plans: Sequence[BitLayerPlan],
    k: int,
    biases: np.ndarray,
    scale: ScaleParams,
    arrange: TileArrangement,
    options: EngineOptions | None = None,
) -> LayerRunResult:
    """Run a conv layer on the BLMAC array from already decoded plans."""
    options = options or EngineOptions()
    if not plans:
        raise ConfigurationError("a layer needs at least one output column")
    z_dim = plans[0].flatten_len // (k * k)
    _check_layer(fmap, k, z_dim, len(plans), biases, arrange)
    order = plans[0].order
    layer_runs = [[layer_positions(layer) for layer in plan.layers] for plan in plans]
    symbols = sum(len(layer) for plan in plans for layer in plan.layers)
    arrays = [BlmacArray(arrange.group_width, options.acc_bits, options.exact_check) for _ in range(arrange.groups)]
    back_end = _ScaleUnit(biases, scale, options.fuse_maxpool)
    width = fmap.dims_x
    measured: list[list[int]] = []

    def compute_slice(y: int, windows: np.ndarray) -> None:
        rows = np.empty((len(plans), width), dtype=np.int64)
        steps = []
        for o, runs in enumerate(layer_runs):
            array = arrays[arrange.group_of(o)]
            array.reset()
            before = array.cycles
            for index, (positions, signs) in enumerate(runs):
                if positions.size:
                    array.step_many(windows[positions], signs)
                if index < len(runs) - 1:
                    array.shift()
                else:
                    array.end_kernel()
            steps.append(array.cycles - before)
            _raise_overflow(array.overflow_lanes(), width, y, o, options.acc_bits)
            rows[o] = array.acc[:width]
        measured.append(steps)
        back_end.push(rows)

    buffer = _stream_layer(fmap, k, order, arrange, compute_slice)
    per_slice, per_kernel = _measured_cycles(measured, arrange, options, fmap.dims_z, width)
    result = LayerRunResult(
        output=back_end.finish(len(plans), width),
        cycles_per_slice=per_slice,
        cycles_map=sum(per_slice),
        cycles_per_kernel=per_kernel,
        decode_steps=symbols * fmap.dims_y,
        peak_resident_pixels=buffer.peak_resident_pixels,
        groups=arrange.groups,
        n_b=plans[0].n_b,
        n3_total=sum(plan.n3 for plan in plans),
        kernel_steps=measured[0] if measured else [0] * len(plans),
    )
    logger.debug(f"BLMAC layer K={k} Z={z_dim} O={len(plans)} on {arrange.groups}x{arrange.group_width}: {result.cycles_map} cycles")
    return result


def run_layer_blmac(
    fmap: FeatureMap,
    stream: CompressedWeightStream,
    biases: np.ndarray,
    scale: ScaleParams,
    arrange: TileArrangement,
    options: EngineOptions | None = None,
) -> LayerRunResult:
    """Run a conv layer on the BLMAC array, decoding each column of ``stream`` once into the weight cache."""
    if fmap.dims_z != stream.z:
        raise ConfigurationError(f"input has {fmap.dims_z} channels, stream expects {stream.z}", {"input_dims": fmap.dims})
    plans = [ac_decode(stream, o)[0] for o in range(stream.o)]
    return run_layer_plans(fmap, plans, stream.k, biases, scale, arrange, options)


def run_layer_mac(
    fmap: FeatureMap,
    w: QuantizedWeightTensor,
    scale: ScaleParams,
    arrange: TileArrangement,
    options: EngineOptions | None = None,
    order: FlattenOrder = FlattenOrder.IZJ,
) -> LayerRunResult:
    """Run a conv layer on the MAC array: one multi-bit weight per nonzero position per cycle."""
    options = options or EngineOptions()
    _check_layer(fmap, w.k, w.z, w.o, w.biases, arrange)
    flat = flatten_tensor(w.weights, order)
    columns = []
    for o in range(w.o):
        positions = np.flatnonzero(flat[:, o])
        columns.append((positions, flat[positions, o].astype(np.int64)))
    arrays = [MacArray(arrange.group_width, options.acc_bits, options.exact_check) for _ in range(arrange.groups)]
    back_end = _ScaleUnit(w.biases, scale, options.fuse_maxpool)
    width = fmap.dims_x
    measured: list[list[int]] = []

    def compute_slice(y: int, windows: np.ndarray) -> None:
        rows = np.empty((w.o, width), dtype=np.int64)
        steps = []
        for o, (positions, weights) in enumerate(columns):
            array = arrays[arrange.group_of(o)]
            array.reset()
            before = array.cycles
            if positions.size:
                array.step_many(windows[positions], weights)
            steps.append(array.cycles - before)
            _raise_overflow(array.overflow_lanes(), width, y, o, options.acc_bits)
            rows[o] = array.acc[:width]
        measured.append(steps)
        back_end.push(rows)

    buffer = _stream_layer(fmap, w.k, order, arrange, compute_slice)
    per_slice, per_kernel = _measured_cycles(measured, arrange, options, fmap.dims_z, width)
    return LayerRunResult(
        output=back_end.finish(w.o, width),
        cycles_per_slice=per_slice,
        cycles_map=sum(per_slice),
        cycles_per_kernel=per_kernel,
        decode_steps=sum(map(sum, measured)),
        peak_resident_pixels=buffer.peak_resident_pixels,
        groups=arrange.groups,
        kernel_steps=measured[0] if measured else [0] * w.o,
    )


def run_layer_reference(fmap: FeatureMap, w: QuantizedWeightTensor, scale: ScaleParams, fuse_maxpool: int | None = None) -> FeatureMap:
    """Oracle path: direct convolution, then the scale stage and optional pooling."""
    scaled = scale_accumulators(conv2d_reference(fmap, w), np.zeros(w.o, dtype=np.int64), scale)
    return maxpool2x2(scaled, fuse_maxpool) if fuse_maxpool else scaled
