"""Kernel flattening and (ZRUN, sign) run-length coding of one bit layer."""

from collections.abc import Iterable
from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

from blmac_sim.errors import ConfigurationError, CorruptStreamError


class SymbolKind(str, Enum):
    RUN = "run"
    EOR = "eor"


@dataclass(frozen=True, slots=True)
class RunSymbol:
    """A (ZRUN, sign) event, or the end-of-run marker that stands for the (0, 0) pair."""

    kind: SymbolKind
    zrun: int = 0
    sign: int = 0

    def __post_init__(self) -> None:
        if self.kind == SymbolKind.RUN:
            if self.zrun < 0 or self.sign not in (1, -1):
                raise ConfigurationError(f"invalid run symbol ({self.zrun}, {self.sign})")
        elif self.zrun or self.sign:
            raise ConfigurationError("EOR carries no payload")

    @classmethod
    def run(cls, zrun: int, sign: int) -> "RunSymbol":
        return cls(SymbolKind.RUN, int(zrun), int(sign))

    @property
    def is_eor(self) -> bool:
        return self.kind == SymbolKind.EOR

    def __repr__(self) -> str:
        return "EOR" if self.is_eor else f"({self.zrun},{self.sign:+d})"


EOR = RunSymbol(SymbolKind.EOR)


class FlattenOrder(IntEnum):
    """Order in which W[j][i][z] is laid out as a vector; the value is the stream header id."""

    IZJ = 0  # (i*Z + z)*K + j: one slice-buffer row fetch, then its K mux taps
    ZIJ = 1  # (z*K + i)*K + j


def flatten_index(j: int, i: int, z: int, k: int, z_dim: int, order: FlattenOrder = FlattenOrder.IZJ) -> int:
    """Linear position of weight (j, i, z) in the flattened kernel column."""
    if not (0 <= j < k and 0 <= i < k and 0 <= z < z_dim):
        raise ConfigurationError(f"kernel index {(j, i, z)} out of range for K={k}, Z={z_dim}")
    if order == FlattenOrder.IZJ:
        return (i * z_dim + z) * k + j
    return (z * k + i) * k + j


def unflatten_index(index: int, k: int, z_dim: int, order: FlattenOrder = FlattenOrder.IZJ) -> tuple[int, int, int]:
    """Inverse of :func:`flatten_index`, returning (j, i, z)."""
    if not 0 <= index < k * k * z_dim:
        raise ConfigurationError(f"flat index {index} out of range for K={k}, Z={z_dim}")
    rest, j = divmod(index, k)
    if order == FlattenOrder.IZJ:
        i, z = divmod(rest, z_dim)
    else:
        z, i = divmod(rest, k)
    return j, i, z


def flatten_column(column: np.ndarray, order: FlattenOrder = FlattenOrder.IZJ) -> np.ndarray:
    """Flatten a (K, K, Z) column indexed [j][i][z] into a vector in ``order``."""
    if order == FlattenOrder.IZJ:
        return np.ascontiguousarray(column.transpose(1, 2, 0)).ravel()
    return np.ascontiguousarray(column.transpose(2, 1, 0)).ravel()


def flatten_tensor(weights: np.ndarray, order: FlattenOrder = FlattenOrder.IZJ) -> np.ndarray:
    """Flatten every column of a (K, K, Z, O) tensor; returns shape (K*K*Z, O)."""
    if order == FlattenOrder.IZJ:
        moved = weights.transpose(1, 2, 0, 3)
    else:
        moved = weights.transpose(2, 1, 0, 3)
    return np.ascontiguousarray(moved).reshape(-1, weights.shape[3])


def rle_encode_layer(digit_positions: Iterable[tuple[int, int]], flatten_len: int) -> list[RunSymbol]:
    """Encode the nonzero digits of one bit layer as (gap, sign) runs closed by one EOR."""
    ordered = sorted(digit_positions)
    symbols: list[RunSymbol] = []
    cursor = 0
    for position, sign in ordered:
        if position < cursor or position >= flatten_len:
            raise ConfigurationError(f"digit position {position} duplicated or outside [0, {flatten_len})")
        symbols.append(RunSymbol.run(position - cursor, sign))
        cursor = position + 1
    symbols.append(EOR)
    return symbols


def rle_encode_positions(positions: np.ndarray, signs: np.ndarray) -> list[RunSymbol]:
    """Vectorized form of :func:`rle_encode_layer` for already sorted, unique positions."""
    if positions.size == 0:
        return [EOR]
    gaps = np.diff(positions, prepend=-1) - 1
    symbols = [RunSymbol.run(gap, sign) for gap, sign in zip(gaps.tolist(), signs.tolist(), strict=True)]
    symbols.append(EOR)
    return symbols


def rle_decode_layer(symbols: Iterable[RunSymbol], flatten_len: int) -> set[tuple[int, int]]:
    """Expand one EOR-terminated run list back into (position, sign) pairs."""
    digits: set[tuple[int, int]] = set()
    cursor = 0
    for symbol in symbols:
        if symbol.is_eor:
            return digits
        position = cursor + symbol.zrun
        if position >= flatten_len:
            raise CorruptStreamError(f"run overruns the kernel: position {position} >= {flatten_len}", {"position": position})
        digits.add((position, symbol.sign))
        cursor = position + 1
    raise CorruptStreamError("bit layer is not terminated by EOR")


def layer_positions(symbols: Iterable[RunSymbol]) -> tuple[np.ndarray, np.ndarray]:
    """Positions and signs of the RUN events of one layer, in stream order."""
    zruns = []
    signs = []
    for symbol in symbols:
        if symbol.is_eor:
            break
        zruns.append(symbol.zrun + 1)
        signs.append(symbol.sign)
    positions = np.cumsum(np.asarray(zruns, dtype=np.int64)) - 1
    return positions, np.asarray(signs, dtype=np.int64)
