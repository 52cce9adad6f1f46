"""Compressed weight streams: static-model binary range coding of bit-layer run lists.

Every RUN event is binarized as:

* an EOR-flag bin (1 = EOR), context coded;
* ZRUN as Exp-Golomb order 0: ``floor(log2(zrun + 1))`` context-coded 1-bins, a
  context-coded 0-bin, then that many bypass suffix bits;
* the sign as one bypass bit (1 = negative).

Context 0 is used until the first RUN of a bit layer has been coded, context 1 after it.
The coder keeps a 32-bit low/range pair, 16-bit probabilities and byte-wise renormalization
with carry propagation into bytes already written. Each output column's payload is
flushed to a byte boundary with the fewest bytes that pin its final interval, so
columns decode independently, and a decoder can tell where a payload should end.
"""

import struct
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

from loguru import logger

from blmac_sim.errors import ConfigurationError, CorruptStreamError, FormatError
from blmac_sim.runlength import EOR, FlattenOrder, RunSymbol
from blmac_sim.signed_digit import BitLayerPlan
from blmac_sim.tensor import atomic_write

STREAM_MAGIC = b"BLWS"
STREAM_VERSION = 1
STREAM_HEADER = struct.Struct("<4sHHIIBB")

PROB_BITS = 16
PROB_ONE = 1 << PROB_BITS
PROB_MIN = 32
PROB_MAX = PROB_ONE - PROB_MIN
PROB_HALF = PROB_ONE // 2

NUM_CONTEXTS = 2
PREFIX_BINS = 16
EOR_BIN = 0
BINS_PER_CONTEXT = 1 + PREFIX_BINS
MAX_PREFIX = 30

RANGE_MASK = 0xFFFFFFFF
RANGE_TOP = 1 << 24
FLUSH_BYTES = 4


def prefix_bin(position: int) -> int:
    """Bin index of unary-prefix position ``position``; deep positions share the last bin."""
    return 1 + min(position, PREFIX_BINS - 1)


@dataclass(frozen=True)
class ProbabilityModel:
    """Static probabilities, P(bin == 1) in 16-bit fixed point, for two contexts."""

    contexts: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if len(self.contexts) != NUM_CONTEXTS or any(len(table) != BINS_PER_CONTEXT for table in self.contexts):
            raise ConfigurationError(f"probability model must hold {NUM_CONTEXTS} tables of {BINS_PER_CONTEXT} bins")
        for table in self.contexts:
            for p in table:
                if not 0 < p < PROB_ONE:
                    raise ConfigurationError(f"probability {p} outside (0, 2^16)")

    @classmethod
    def uniform(cls) -> "ProbabilityModel":
        return cls(tuple((PROB_HALF,) * BINS_PER_CONTEXT for _ in range(NUM_CONTEXTS)))

    def p1(self, context: int, bin_index: int) -> int:
        return self.contexts[context][bin_index]

    def to_bytes(self) -> bytes:
        values = [p for table in self.contexts for p in table]
        return struct.pack(f"<H{len(values)}H", len(values), *values)

    @classmethod
    def from_bytes(cls, blob: bytes, offset: int = 0) -> tuple["ProbabilityModel", int]:
        """Parse a length-prefixed table; returns the model and the offset after it."""
        try:
            (count,) = struct.unpack_from("<H", blob, offset)
            values = struct.unpack_from(f"<{count}H", blob, offset + 2)
        except struct.error as e:
            raise FormatError(f"truncated probability model: {e}", {"byte_offset": offset}) from e
        if count != NUM_CONTEXTS * BINS_PER_CONTEXT:
            raise FormatError(f"probability model holds {count} entries, expected {NUM_CONTEXTS * BINS_PER_CONTEXT}")
        tables = tuple(tuple(values[c * BINS_PER_CONTEXT : (c + 1) * BINS_PER_CONTEXT]) for c in range(NUM_CONTEXTS))
        return cls(tables), offset + 2 + 2 * count


def flush_point(low: int, range_: int) -> tuple[int, int]:
    """Fewest flush bytes for the interval ``[low, low + range_)`` and the value they encode, before carry."""
    for nbytes in range(FLUSH_BYTES + 1):
        step = 1 << (32 - 8 * nbytes)
        value = -(-low // step) * step
        if value < low + range_:
            break
    return nbytes, value


class RangeEncoder:
    """Binary range encoder with carry propagation."""

    def __init__(self) -> None:
        self.low = 0
        self.range = RANGE_MASK
        self.out = bytearray()

    def _propagate_carry(self) -> None:
        if self.low > RANGE_MASK:
            self.low &= RANGE_MASK
            index = len(self.out) - 1
            while self.out[index] == 0xFF:
                self.out[index] = 0
                index -= 1
            self.out[index] += 1

    def _normalize(self) -> None:
        while self.range < RANGE_TOP:
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & RANGE_MASK
            self.range <<= 8

    def encode_bit(self, bit: int, p1: int) -> None:
        bound = (self.range >> PROB_BITS) * p1
        if bit:
            self.range = bound
        else:
            self.low += bound
            self.range -= bound
            self._propagate_carry()
        self._normalize()

    def encode_bypass(self, bit: int) -> None:
        self.range >>= 1
        if bit:
            self.low += self.range
            self._propagate_carry()
        self._normalize()

    def finish(self) -> bytes:
        """Emit the fewest bytes (at most four) that select a value inside the final interval."""
        nbytes, self.low = flush_point(self.low, self.range)
        self._propagate_carry()
        for _ in range(nbytes):
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & RANGE_MASK
        return bytes(self.out)


class RangeDecoder:
    """Decoder matching :class:`RangeEncoder`; reads past the payload end as zero bytes."""

    def __init__(self, payload: bytes, base_offset: int = 0, o: int | None = None) -> None:
        self.payload = payload
        self.base_offset = base_offset
        self.o = o
        self.pos = 0
        self.range = RANGE_MASK
        self.code = 0
        self.window = 0
        for _ in range(FLUSH_BYTES):
            self.code = (self.code << 8) | self._next_byte()

    @property
    def byte_offset(self) -> int:
        return self.base_offset + self.pos

    def _next_byte(self) -> int:
        position = self.pos
        self.pos += 1
        if position < len(self.payload):
            byte = self.payload[position]
        elif position >= len(self.payload) + FLUSH_BYTES:
            raise CorruptStreamError("payload exhausted before the last bit layer", {"o": self.o, "byte_offset": self.base_offset + position})
        else:
            byte = 0
        self.window = ((self.window << 8) | byte) & RANGE_MASK
        return byte

    def finish(self) -> None:
        """Check that the payload ends exactly where the encoder's minimal flush ended.

        The last four bytes read minus ``code`` give back the encoder's final ``low``;
        a well-formed payload ends ``nbytes`` into that window and those bytes hold the
        flushed value.
        """
        low = (self.window - self.code) & RANGE_MASK
        nbytes, value = flush_point(low, self.range)
        end = self.pos - FLUSH_BYTES + nbytes
        if end != len(self.payload) or value & RANGE_MASK != self.window:
            raise CorruptStreamError(
                "payload does not end where the last bit layer ends",
                {"o": self.o, "byte_offset": self.base_offset + len(self.payload), "expected_bytes": end},
            )

    def _normalize(self) -> None:
        while self.range < RANGE_TOP:
            self.code = ((self.code << 8) | self._next_byte()) & RANGE_MASK
            self.range <<= 8

    def decode_bit(self, p1: int) -> int:
        bound = (self.range >> PROB_BITS) * p1
        if self.code < bound:
            self.range = bound
            bit = 1
        else:
            self.code -= bound
            self.range -= bound
            bit = 0
        self._normalize()
        return bit

    def decode_bypass(self) -> int:
        self.range >>= 1
        if self.code >= self.range:
            self.code -= self.range
            bit = 1
        else:
            bit = 0
        self._normalize()
        return bit


def _layer_bins(layer: Sequence[RunSymbol]) -> Iterator[tuple[int | None, int, int]]:
    """Binarize one bit layer as (context, bin, bit); context ``None`` marks a bypass bit."""
    context = 0
    for symbol in layer:
        if symbol.is_eor:
            yield context, EOR_BIN, 1
            return
        yield context, EOR_BIN, 0
        value = symbol.zrun + 1
        prefix = value.bit_length() - 1
        for position in range(prefix):
            yield context, prefix_bin(position), 1
        yield context, prefix_bin(prefix), 0
        suffix = value - (1 << prefix)
        for shift in range(prefix - 1, -1, -1):
            yield None, 0, (suffix >> shift) & 1
        yield None, 0, 1 if symbol.sign < 0 else 0
        context = 1


def encode_plan(plan: BitLayerPlan, model: ProbabilityModel) -> bytes:
    """Arithmetic-code one column's plan into a self-contained payload."""
    encoder = RangeEncoder()
    for layer in plan.layers:
        for context, bin_index, bit in _layer_bins(layer):
            if context is None:
                encoder.encode_bypass(bit)
            else:
                encoder.encode_bit(bit, model.p1(context, bin_index))
    return encoder.finish()


def decode_plan(payload: bytes, model: ProbabilityModel, o: int, n_b: int, flatten_len: int, order: FlattenOrder, base_offset: int = 0) -> BitLayerPlan:
    """Decode exactly ``n_b`` EOR-terminated layers from one column's payload."""
    decoder = RangeDecoder(payload, base_offset, o)
    layers = []
    for _ in range(n_b):
        symbols: list[RunSymbol] = []
        context = 0
        cursor = 0
        while True:
            if decoder.decode_bit(model.p1(context, EOR_BIN)):
                symbols.append(EOR)
                break
            prefix = 0
            while decoder.decode_bit(model.p1(context, prefix_bin(prefix))):
                prefix += 1
                if prefix > MAX_PREFIX:
                    raise CorruptStreamError("run length prefix too long", {"o": o, "byte_offset": decoder.byte_offset})
            value = 1
            for _ in range(prefix):
                value = (value << 1) | decoder.decode_bypass()
            zrun = value - 1
            sign = -1 if decoder.decode_bypass() else 1
            cursor += zrun
            if cursor >= flatten_len:
                raise CorruptStreamError(f"run overruns the kernel at position {cursor}", {"o": o, "byte_offset": decoder.byte_offset})
            cursor += 1
            symbols.append(RunSymbol.run(zrun, sign))
            context = 1
        layers.append(tuple(symbols))
    decoder.finish()
    return BitLayerPlan(o=o, n_b=n_b, layers=tuple(layers), flatten_len=flatten_len, order=order)


@dataclass(frozen=True)
class CompressedWeightStream:
    """Header plus per-column arithmetic-coded payloads of one conv layer."""

    k: int
    z: int
    o: int
    n_b: int
    order: FlattenOrder
    model: ProbabilityModel
    offsets: tuple[int, ...]
    payload: bytes

    @property
    def flatten_len(self) -> int:
        return self.k * self.k * self.z

    @property
    def payload_bytes(self) -> int:
        return len(self.payload)

    @property
    def size_bytes(self) -> int:
        return len(self.to_bytes())

    def payload_for(self, o: int) -> bytes:
        return self.payload[self.offsets[o] : self.offsets[o + 1]]

    def to_bytes(self) -> bytes:
        header = STREAM_HEADER.pack(STREAM_MAGIC, STREAM_VERSION, self.k, self.z, self.o, self.n_b, int(self.order))
        offsets = struct.pack(f"<{len(self.offsets)}I", *self.offsets)
        return header + self.model.to_bytes() + offsets + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CompressedWeightStream":
        if len(blob) < STREAM_HEADER.size:
            raise FormatError("weight stream shorter than its header", {"size": len(blob)})
        magic, version, k, z, o, n_b, order_id = STREAM_HEADER.unpack_from(blob)
        if magic != STREAM_MAGIC:
            raise FormatError(f"bad weight stream magic {magic!r}")
        if version != STREAM_VERSION:
            raise FormatError(f"unsupported weight stream version {version}")
        try:
            order = FlattenOrder(order_id)
        except ValueError as e:
            raise FormatError(f"unknown flatten order id {order_id}") from e
        model, cursor = ProbabilityModel.from_bytes(blob, STREAM_HEADER.size)
        try:
            offsets = struct.unpack_from(f"<{o + 1}I", blob, cursor)
        except struct.error as e:
            raise CorruptStreamError(f"truncated offset table: {e}", {"byte_offset": cursor}) from e
        cursor += 4 * (o + 1)
        payload = blob[cursor:]
        if offsets[-1] != len(payload) or any(a > b for a, b in zip(offsets, offsets[1:], strict=False)):
            raise CorruptStreamError(f"payload holds {len(payload)} bytes, offsets declare {offsets[-1]}", {"byte_offset": cursor + len(payload)})
        return cls(k=k, z=z, o=o, n_b=n_b, order=order, model=model, offsets=tuple(offsets), payload=bytes(payload))

    def save(self, path: str | Path) -> None:
        atomic_write(Path(path), self.to_bytes())
        logger.info(f"Wrote weight stream K={self.k} Z={self.z} O={self.o} N_b={self.n_b} ({self.payload_bytes} payload bytes) to {path}")

    @classmethod
    def load(cls, path: str | Path) -> "CompressedWeightStream":
        return cls.from_bytes(Path(path).read_bytes())


def ac_encode(plans: Sequence[BitLayerPlan], model: ProbabilityModel, *, k: int, z_dim: int) -> CompressedWeightStream:
    """Compress the plans of a whole layer, one independently decodable payload per column."""
    if not plans:
        raise ConfigurationError("at least one plan is required")
    first = plans[0]
    if first.flatten_len != k * k * z_dim:
        raise ConfigurationError(f"plans flatten {first.flatten_len} weights, K={k} Z={z_dim} implies {k * k * z_dim}")
    offsets = [0]
    chunks = []
    for index, plan in enumerate(plans):
        if plan.o != index:
            raise ConfigurationError(f"plans must cover o = 0 .. O-1 in order; got o={plan.o} at position {index}")
        if (plan.n_b, plan.flatten_len, plan.order) != (first.n_b, first.flatten_len, first.order):
            raise ConfigurationError(f"plan o={plan.o} disagrees with the layer's N_b, length or flatten order")
        chunk = encode_plan(plan, model)
        chunks.append(chunk)
        offsets.append(offsets[-1] + len(chunk))
    return CompressedWeightStream(
        k=k, z=z_dim, o=len(plans), n_b=first.n_b, order=first.order, model=model, offsets=tuple(offsets), payload=b"".join(chunks)
    )


def ac_decode(stream: CompressedWeightStream, o: int) -> tuple[BitLayerPlan, int]:
    """Decode column ``o``; returns the plan and its decode-step count (one per symbol)."""
    if not 0 <= o < stream.o:
        raise ConfigurationError(f"output index {o} out of range [0, {stream.o})")
    start, end = stream.offsets[o], stream.offsets[o + 1]
    if end > len(stream.payload) or start > end:
        raise CorruptStreamError(f"payload of o={o} ends at byte {end} but the stream holds {len(stream.payload)}", {"o": o, "byte_offset": len(stream.payload)})
    plan = decode_plan(stream.payload[start:end], stream.model, o, stream.n_b, stream.flatten_len, stream.order, base_offset=start)
    return plan, plan.decode_steps


def estimate_model(plans: Sequence[BitLayerPlan]) -> ProbabilityModel:
    """Fit static bin probabilities to the empirical frequencies of ``plans``."""
    if not plans:
        raise ConfigurationError("at least one plan is required")
    ones = [[0] * BINS_PER_CONTEXT for _ in range(NUM_CONTEXTS)]
    totals = [[0] * BINS_PER_CONTEXT for _ in range(NUM_CONTEXTS)]
    for plan in plans:
        for layer in plan.layers:
            for context, bin_index, bit in _layer_bins(layer):
                if context is None:
                    continue
                totals[context][bin_index] += 1
                ones[context][bin_index] += bit
    tables = []
    for context in range(NUM_CONTEXTS):
        table = []
        for bin_index in range(BINS_PER_CONTEXT):
            total = totals[context][bin_index]
            if total == 0:
                table.append(PROB_HALF)
                continue
            p = (ones[context][bin_index] * PROB_ONE + total // 2) // total
            table.append(min(PROB_MAX, max(PROB_MIN, p)))
        tables.append(tuple(table))
    return ProbabilityModel(tuple(tables))


def compress_plans(plans: Sequence[BitLayerPlan], *, k: int, z_dim: int, model: ProbabilityModel | None = None) -> CompressedWeightStream:
    """Fit a model (unless given) and compress."""
    return ac_encode(plans, model or estimate_model(plans), k=k, z_dim=z_dim)


def decode_all(stream: CompressedWeightStream) -> list[BitLayerPlan]:
    return [ac_decode(stream, o)[0] for o in range(stream.o)]
