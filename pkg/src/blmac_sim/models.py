"""Pydantic models for blmac-sim records and reports."""

from enum import Enum
from typing import Any, Literal

from pydantic import BaseModel, Field, model_validator

from blmac_sim.config import DEFAULT_LEAKY_NUM, DEFAULT_LEAKY_SHIFT, BlmacSimConfig

Dims = tuple[int, int, int]


class ErrorDetails(BaseModel):
    """Structured error details."""

    message: str = Field(..., description="A human-readable error message.")
    code: str = Field(..., description="A machine-readable error code (e.g., 'CORRUPT_STREAM').")
    details: dict[str, Any] = Field(default_factory=dict, description="Additional details about the error.")


class CommandResult(BaseModel):
    """Represents the final result of a command."""

    status: Literal["error", "success"] = Field(..., description="The final status of the command.")
    output: str = Field(..., description="Human-readable summary, or an error message.")
    error: ErrorDetails | None = Field(None, description="Structured error information, present if status is 'error'.")
    exit_code: int | None = Field(None, description="The exit code of the command.")


class ScaleParams(BaseModel):
    """Bias, leaky ReLU and 8-bit rescaling applied to each finished accumulator row."""

    leaky_num: int = Field(DEFAULT_LEAKY_NUM, description="Numerator of the leaky slope.")
    leaky_shift: int = Field(DEFAULT_LEAKY_SHIFT, ge=0, description="Leaky slope denominator is 2**leaky_shift.")
    out_mult: int = Field(1, description="Output multiplier.")
    out_shift: int = Field(0, ge=0, description="Right shift applied after the multiplier.")
    bias_mode: Literal["pre_activation"] = Field("pre_activation", description="Bias is added before the activation.")
    activation: Literal["leaky", "linear"] = Field("leaky", description="'linear' skips the leaky slope.")

    @model_validator(mode="after")
    def _check_slope(self) -> "ScaleParams":
        if self.activation == "leaky" and not 0 < self.leaky_num < (1 << self.leaky_shift):
            raise ValueError(f"leaky slope {self.leaky_num}/2^{self.leaky_shift} must lie in (0, 1)")
        return self


class EngineOptions(BaseModel):
    """Options of one layer run on the processor model."""

    acc_bits: int = Field(20, ge=2, le=62)
    fuse_maxpool: Literal[1, 2] | None = Field(None, description="Stride of a maxpool fused into the scale unit.")
    exact_check: bool = Field(False, description="Raise on results that do not fit acc_bits instead of wrapping.")
    overhead_fraction: float = Field(0.12, ge=0.0)
    row_overhead_cycles: int = Field(0, ge=0)
    slice_overhead_cycles: int = Field(0, ge=0)
    mem_bytes_per_cycle: float = Field(0.0, ge=0.0, description="Slice-load rate; 0 disables load/compute overlap modeling.")

    @classmethod
    def from_config(cls, config: BlmacSimConfig, **overrides: Any) -> "EngineOptions":
        values = {
            "acc_bits": config.BLMAC_ACC_BITS,
            "exact_check": config.BLMAC_EXACT_CHECK,
            "overhead_fraction": config.BLMAC_OVERHEAD_FRACTION,
            "row_overhead_cycles": config.BLMAC_ROW_OVERHEAD_CYCLES,
            "slice_overhead_cycles": config.BLMAC_SLICE_OVERHEAD_CYCLES,
            "mem_bytes_per_cycle": config.BLMAC_MEM_BYTES_PER_CYCLE,
        }
        values.update(overrides)
        return cls(**values)


class OverheadParams(BaseModel):
    """Overhead terms of the analytical cycle model."""

    fraction: float = Field(0.12, ge=0.0, description="Extra cycles per kernel as a fraction of N_3 + N_b.")
    row_cycles: int = Field(0, ge=0, description="Fixed cycles per (o, slice) row.")
    slice_cycles: int = Field(0, ge=0, description="Fixed cycles per output slice.")

    @classmethod
    def from_options(cls, options: EngineOptions) -> "OverheadParams":
        return cls(fraction=options.overhead_fraction, row_cycles=options.row_overhead_cycles, slice_cycles=options.slice_overhead_cycles)


class LayerKind(str, Enum):
    CONV = "conv"
    MAXPOOL = "maxpool"
    UPSAMPLE = "upsample"
    ROUTE = "route"


class LayerSpec(BaseModel):
    """Shape description of one layer, as listed in the performance tables."""

    name: str
    kind: LayerKind
    k: int = 0
    z: int = 0
    o: int = 0
    input_dims: Dims
    output_dims: Dims
    fused_maxpool: bool = False
    pool_stride: int = 2
    sources: list[str] = Field(default_factory=list, description="Route inputs, by layer name.")

    @model_validator(mode="after")
    def _check_dims(self) -> "LayerSpec":
        x, y, _ = self.input_dims
        x1, y1, z1 = self.output_dims
        if self.kind == LayerKind.CONV:
            expected = (x // 2, y // 2) if self.fused_maxpool and self.pool_stride == 2 else (x, y)
            if (x1, y1) != expected or z1 != self.o or self.input_dims[2] != self.z:
                raise ValueError(f"conv layer {self.name}: output dims {self.output_dims} inconsistent with input {self.input_dims}")
        elif self.kind == LayerKind.MAXPOOL:
            expected = (x // 2, y // 2) if self.pool_stride == 2 else (x, y)
            if (x1, y1) != expected:
                raise ValueError(f"maxpool layer {self.name}: output dims {self.output_dims} inconsistent with input {self.input_dims}")
        return self

    @property
    def computed_slices(self) -> int:
        """Slices the array computes, pooled or not."""
        return self.input_dims[1]

    @property
    def macs_per_kernel(self) -> int:
        return self.k * self.k * self.z * self.o

    @property
    def computed_dims(self) -> Dims:
        """Dims of the map the array computes, before any fused pooling."""
        if self.kind != LayerKind.CONV:
            return self.output_dims
        return (self.input_dims[0], self.input_dims[1], self.o)

    @property
    def kernel_label(self) -> str:
        if self.kind == LayerKind.CONV:
            return f"{self.k}x{self.k}x{self.z}x{self.o}"
        if self.kind == LayerKind.MAXPOOL:
            return f"2x2/{self.pool_stride}"
        return ""


class CycleEstimate(BaseModel):
    cycles_per_slice: int
    cycles_per_map: int
    cycles_per_kernel: int


class BandwidthRow(BaseModel):
    """Bytes moved to and from external memory for one conv layer."""

    name: str
    input_dims: Dims
    output_dims: Dims
    input_bytes: int = Field(..., ge=0)
    output_bytes: int = Field(..., ge=0)
    weight_bytes: int = Field(..., ge=0)
    passes: int = Field(1, ge=1)


class BandwidthTotals(BaseModel):
    input_bytes: int = 0
    output_bytes: int = 0
    weight_bytes: int = 0


class BandwidthReport(BaseModel):
    rows: list[BandwidthRow] = Field(default_factory=list)
    totals: BandwidthTotals = Field(default_factory=BandwidthTotals)


class LayerReport(BaseModel):
    """One row of the cycle table, from the engine or from the analytical model."""

    name: str
    kind: LayerKind
    kernel: str = ""
    input_dims: Dims
    output_dims: Dims
    macs_per_kernel: int = 0
    cycles_per_slice: int = 0
    cycles_per_map: int = 0
    cycles_per_kernel: int = 0
    decode_steps: int = 0
    n_b: int = 0
    n3_total: int = 0
    weight_bytes: int = 0
    peak_resident_pixels: int = 0
    calibrated: bool = False


class EngineReport(BaseModel):
    """Per-network record written next to the output feature maps."""

    layers: list[LayerReport] = Field(default_factory=list)
    bandwidth: BandwidthReport = Field(default_factory=BandwidthReport)
    frame_cycles: int = 0
    fps: float | None = None
    required_clock_hz: float | None = None
    total_operations: float = 0.0
    operations_per_clock: float | None = None


class CompressSummary(BaseModel):
    """Summary of one compressed conv layer."""

    name: str
    raw_bytes: int
    compressed_bytes: int
    payload_bytes: int
    n_b: int
    n3_total: int


class Calibration(BaseModel):
    """Published cycles/slice figures substituted for model estimates in reports."""

    layers: dict[str, int] = Field(default_factory=dict, description="Cycles per slice by layer name.")
    frame_cycles: int | None = Field(None, ge=1, description="Published cycles per frame, if known.")
