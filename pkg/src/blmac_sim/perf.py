"""Cycle, bandwidth and clock-requirement accounting for a layer stack."""

import math
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import NamedTuple

import pandas as pd
import yaml
from loguru import logger

from blmac_sim.codec import CompressedWeightStream, ac_decode
from blmac_sim.engine import TileArrangement, arrange_tiles, kernel_cycles
from blmac_sim.errors import ConfigurationError, FormatError
from blmac_sim.models import (
    BandwidthReport,
    BandwidthRow,
    BandwidthTotals,
    Calibration,
    CycleEstimate,
    Dims,
    EngineReport,
    LayerKind,
    LayerReport,
    LayerSpec,
    OverheadParams,
)
from blmac_sim.signed_digit import BitLayerPlan
from blmac_sim.tensor import atomic_write


class PublishedLayer(NamedTuple):
    name: str
    kernel: tuple[int, int, int]
    input_dims: Dims
    output_dims: Dims
    macs_per_kernel: int
    cycles_per_slice: int
    cycles_per_map: int
    cycles_per_kernel: int


class PublishedBandwidth(NamedTuple):
    name: str
    input_dims: Dims
    output_dims: Dims
    input_bytes: int
    output_bytes: int
    weight_bytes: int


# Conv rows of the published TinyYolo v3 cycle table; "208x280" maps read as 208x208.
PUBLISHED_LAYERS = (
    PublishedLayer("conv0", (3, 3, 16), (416, 416, 3), (416, 416, 16), 432, 723, 300768, 723),
    PublishedLayer("conv2", (3, 16, 32), (208, 208, 16), (208, 208, 32), 4608, 1937, 402896, 3874),
    PublishedLayer("conv4", (3, 32, 64), (104, 104, 32), (104, 104, 64), 18432, 4172, 433888, 16688),
    PublishedLayer("conv6", (3, 64, 128), (52, 52, 64), (52, 52, 128), 73728, 8721, 453492, 69768),
    PublishedLayer("conv8", (3, 128, 256), (26, 26, 128), (26, 26, 256), 294912, 17978, 467428, 287648),
    PublishedLayer("conv10", (3, 256, 512), (13, 13, 256), (13, 13, 512), 1179648, 37142, 482846, 1188544),
    PublishedLayer("conv12", (3, 512, 1024), (13, 13, 512), (13, 13, 1024), 4718592, 171762, 2232906, 5496384),
    PublishedLayer("conv13", (1, 1024, 256), (13, 13, 1024), (13, 13, 256), 262144, 9013, 117169, 288416),
    PublishedLayer("conv14", (3, 256, 512), (13, 13, 256), (13, 13, 512), 1179648, 36538, 474994, 1169216),
    PublishedLayer("conv15", (1, 512, 255), (13, 13, 512), (13, 13, 255), 130560, 16596, 215748, 531072),
    PublishedLayer("conv18", (1, 256, 128), (13, 13, 256), (13, 13, 128), 32768, 4257, 55341, 136224),
    PublishedLayer("conv21", (3, 384, 256), (26, 26, 384), (26, 26, 256), 884736, 52111, 1354886, 833776),
    PublishedLayer("conv22", (1, 256, 255), (26, 26, 256), (26, 26, 255), 65280, 12515, 325390, 200240),
)

# Byte columns as printed; several 86,528-byte maps appear as 85,258.
PUBLISHED_BANDWIDTH = (
    PublishedBandwidth("conv0", (416, 416, 3), (208, 208, 16), 519168, 692224, 288),
    PublishedBandwidth("conv2", (208, 208, 16), (104, 104, 32), 692224, 346112, 1788),
    PublishedBandwidth("conv4", (104, 104, 32), (52, 52, 64), 346112, 173056, 7506),
    PublishedBandwidth("conv6", (52, 52, 64), (26, 26, 128), 173056, 85258, 31372),
    PublishedBandwidth("conv8", (26, 26, 128), (13, 13, 256), 85258, 43264, 131476),
    PublishedBandwidth("conv10", (13, 13, 256), (13, 13, 512), 43264, 85258, 526850),
    PublishedBandwidth("conv12", (13, 13, 512), (13, 13, 1024), 85258, 173056, 1811304),
    PublishedBandwidth("conv13", (13, 13, 1024), (13, 13, 256), 173056, 43264, 123982),
    PublishedBandwidth("conv14", (13, 13, 256), (13, 13, 512), 43264, 85258, 511406),
    PublishedBandwidth("conv15", (13, 13, 512), (13, 13, 255), 85258, 43095, 63768),
    PublishedBandwidth("conv18", (13, 13, 256), (13, 13, 128), 43264, 43264, 16460),
    PublishedBandwidth("conv21", (26, 26, 384), (26, 26, 256), 259584, 173056, 369792),
    PublishedBandwidth("conv22", (26, 26, 256), (26, 26, 255), 173056, 172380, 30964),
)
PUBLISHED_BANDWIDTH_TOTALS = BandwidthTotals(input_bytes=2721822, output_bytes=2158545, weight_bytes=3626956)


def dims_product(dims: Dims) -> int:
    return dims[0] * dims[1] * dims[2]


def cycles_estimate_layer(spec: LayerSpec, plans: Sequence[BitLayerPlan], arrange: TileArrangement, overhead: OverheadParams | None = None) -> CycleEstimate:
    """Analytical cycle counts of a conv layer from its plans.

    Every input slice is computed, so the map total uses the input slice count even when
    a fused maxpool halves the output.
    """
    overhead = overhead or OverheadParams()
    if len(plans) != spec.o:
        raise ConfigurationError(f"layer {spec.name} has {spec.o} outputs but {len(plans)} plans were given")
    per_kernel = sum(kernel_cycles(plan.decode_steps, overhead) for plan in plans)
    per_slice = math.ceil(per_kernel / arrange.groups) + overhead.slice_cycles
    return CycleEstimate(cycles_per_slice=per_slice, cycles_per_map=per_slice * spec.computed_slices, cycles_per_kernel=per_kernel)


def multipass_factor(compressed_bytes: int, cache_bytes: int) -> int:
    """Passes over the input map needed when the compressed weights exceed the cache."""
    if cache_bytes <= 0:
        raise ConfigurationError(f"cache size must be positive, got {cache_bytes}")
    return max(1, math.ceil(compressed_bytes / cache_bytes))


def bandwidth_report(specs: Sequence[LayerSpec], weight_sizes: Mapping[str, int], cache_bytes: int) -> BandwidthReport:
    """External-memory bytes of every conv layer; input bytes repeat once per pass."""
    rows = []
    for spec in specs:
        if spec.kind != LayerKind.CONV:
            continue
        weight_bytes = int(weight_sizes.get(spec.name, 0))
        passes = multipass_factor(weight_bytes, cache_bytes)
        rows.append(
            BandwidthRow(
                name=spec.name,
                input_dims=spec.input_dims,
                output_dims=spec.output_dims,
                input_bytes=dims_product(spec.input_dims) * passes,
                output_bytes=dims_product(spec.output_dims),
                weight_bytes=weight_bytes,
                passes=passes,
            )
        )
    totals = BandwidthTotals(
        input_bytes=sum(r.input_bytes for r in rows),
        output_bytes=sum(r.output_bytes for r in rows),
        weight_bytes=sum(r.weight_bytes for r in rows),
    )
    return BandwidthReport(rows=rows, totals=totals)


def required_clock(cycles_per_frame: int, fps: float) -> float:
    """Clock in Hz needed to sustain ``fps`` frames per second."""
    if cycles_per_frame <= 0 or fps <= 0:
        raise ConfigurationError(f"cycles per frame and fps must be positive, got {cycles_per_frame} and {fps}")
    return cycles_per_frame * fps


def operations_per_clock(total_ops: float, cycles_per_frame: int) -> float:
    if total_ops <= 0 or cycles_per_frame <= 0:
        raise ConfigurationError(f"operations and cycles must be positive, got {total_ops} and {cycles_per_frame}")
    return total_ops / cycles_per_frame


def throughput_tops(ops_per_clock: float, clock_hz: float) -> float:
    """Tera-operations per second at ``clock_hz``."""
    return ops_per_clock * clock_hz / 1e12


def scale_frame_cycles(frame_cycles: int, from_slices: int, to_slices: int) -> int:
    """Frame cycles for a different image height, every layer's slice count scaling alike."""
    if from_slices <= 0 or to_slices <= 0:
        raise ConfigurationError("slice counts must be positive")
    return round(frame_cycles * to_slices / from_slices)


def weight_load_cycles(weight_bytes: int, bytes_per_cycle: float) -> int:
    """Cycles to fill the weight caches; zero when the load rate is not modeled."""
    if bytes_per_cycle <= 0:
        return 0
    return math.ceil(weight_bytes / bytes_per_cycle)


def network_operations(specs: Sequence[LayerSpec]) -> float:
    """Operations per frame, counting a multiply-accumulate as two."""
    return float(sum(2 * spec.macs_per_kernel * spec.input_dims[0] * spec.input_dims[1] for spec in specs if spec.kind == LayerKind.CONV))


def bandwidth_deltas(rows: Sequence[BandwidthRow], published: Sequence[PublishedBandwidth] = PUBLISHED_BANDWIDTH) -> list[dict]:
    """Computed-minus-printed byte differences for every matching conv row."""
    by_name = {row.name: row for row in rows}
    deltas = []
    for entry in published:
        row = by_name.get(entry.name)
        if row is None:
            continue
        for column in ("input_bytes", "output_bytes"):
            computed = getattr(row, column) // row.passes if column == "input_bytes" else getattr(row, column)
            printed = getattr(entry, column)
            if computed != printed:
                deltas.append({"name": entry.name, "column": column, "computed": computed, "published": printed, "delta": computed - printed})
    return deltas


def load_calibration(path: str | Path) -> Calibration:
    """Read a calibration YAML file: ``layers: {name: {cycles_per_slice: N}}`` and ``frame_cycles``."""
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as e:
        raise FormatError(f"calibration file {path} is not valid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise FormatError(f"calibration file {path} must hold a mapping")
    layers = {}
    for name, entry in (raw.get("layers") or {}).items():
        if not isinstance(entry, dict) or "cycles_per_slice" not in entry:
            raise FormatError(f"calibration entry {name} lacks cycles_per_slice")
        layers[str(name)] = int(entry["cycles_per_slice"])
    return Calibration(layers=layers, frame_cycles=raw.get("frame_cycles"))


def build_report(
    specs: Sequence[LayerSpec],
    streams: Mapping[str, CompressedWeightStream],
    *,
    overhead: OverheadParams | None = None,
    cache_bytes: int = 262144,
    array_width: int = 416,
    tile_width: int = 13,
    fps: float | None = None,
    calibration: Calibration | None = None,
    weight_load_bytes_per_cycle: float = 0.0,
) -> EngineReport:
    """Analytical report of a layer stack from its compressed streams."""
    overhead = overhead or OverheadParams()
    calibration = calibration or Calibration()
    known = {spec.name for spec in specs}
    for name in calibration.layers:
        if name not in known:
            logger.warning(f"Calibration names unknown layer {name}; ignored")
    layers = []
    for spec in specs:
        if spec.kind != LayerKind.CONV:
            layers.append(LayerReport(name=spec.name, kind=spec.kind, kernel=spec.kernel_label, input_dims=spec.input_dims, output_dims=spec.output_dims))
            continue
        stream = streams.get(spec.name)
        if stream is None:
            raise ConfigurationError(f"no weight stream for layer {spec.name}", {"layer": spec.name})
        plans = [ac_decode(stream, o)[0] for o in range(stream.o)]
        estimate = cycles_estimate_layer(spec, plans, arrange_tiles(spec.input_dims[0], array_width, tile_width), overhead)
        per_slice = calibration.layers.get(spec.name, estimate.cycles_per_slice)
        layers.append(
            LayerReport(
                name=spec.name,
                kind=spec.kind,
                kernel=spec.kernel_label,
                input_dims=spec.input_dims,
                output_dims=spec.computed_dims,
                macs_per_kernel=spec.macs_per_kernel,
                cycles_per_slice=per_slice,
                cycles_per_map=per_slice * spec.computed_slices,
                cycles_per_kernel=estimate.cycles_per_kernel,
                decode_steps=sum(plan.decode_steps for plan in plans),
                n_b=stream.n_b,
                n3_total=sum(plan.n3 for plan in plans),
                weight_bytes=stream.size_bytes,
                calibrated=spec.name in calibration.layers,
            )
        )
        logger.info(f"Layer {spec.name}: {per_slice} cycles/slice, {per_slice * spec.computed_slices} cycles/map")
    bandwidth = bandwidth_report(specs, {r.name: r.weight_bytes for r in layers if r.kind == LayerKind.CONV}, cache_bytes)
    return finish_report(layers, bandwidth, specs, fps=fps, calibration=calibration, weight_load_bytes_per_cycle=weight_load_bytes_per_cycle)


def finish_report(
    layers: list[LayerReport],
    bandwidth: BandwidthReport,
    specs: Sequence[LayerSpec],
    *,
    fps: float | None = None,
    calibration: Calibration | None = None,
    weight_load_bytes_per_cycle: float = 0.0,
) -> EngineReport:
    """Add frame totals, clock requirement and operations per clock to per-layer rows."""
    frame_cycles = sum(layer.cycles_per_map for layer in layers)
    frame_cycles += weight_load_cycles(bandwidth.totals.weight_bytes, weight_load_bytes_per_cycle)
    if calibration is not None and calibration.frame_cycles is not None:
        if calibration.frame_cycles != frame_cycles:
            logger.warning(f"Published frame total {calibration.frame_cycles} differs from the summed layers ({frame_cycles}); using the published total")
        frame_cycles = calibration.frame_cycles
    total_ops = network_operations(specs)
    report = EngineReport(layers=layers, bandwidth=bandwidth, frame_cycles=frame_cycles, fps=fps, total_operations=total_ops)
    if fps is not None and frame_cycles > 0:
        report.required_clock_hz = required_clock(frame_cycles, fps)
    if total_ops > 0 and frame_cycles > 0:
        report.operations_per_clock = operations_per_clock(total_ops, frame_cycles)
    return report


def cycles_frame(report: EngineReport) -> pd.DataFrame:
    columns = ["layer", "kind", "kernel", "input", "output", "macs_per_kernel", "cycles_per_slice", "cycles_per_map", "cycles_per_kernel"]
    records = [
        {
            "layer": layer.name,
            "kind": layer.kind.value,
            "kernel": layer.kernel,
            "input": "x".join(map(str, layer.input_dims)),
            "output": "x".join(map(str, layer.output_dims)),
            "macs_per_kernel": layer.macs_per_kernel,
            "cycles_per_slice": layer.cycles_per_slice,
            "cycles_per_map": layer.cycles_per_map,
            "cycles_per_kernel": layer.cycles_per_kernel,
        }
        for layer in report.layers
    ]
    return pd.DataFrame(records, columns=columns)


def bandwidth_frame(bandwidth: BandwidthReport) -> pd.DataFrame:
    columns = ["layer", "input", "input_bytes", "output", "output_bytes", "weight_bytes", "passes"]
    records = [
        {
            "layer": row.name,
            "input": "x".join(map(str, row.input_dims)),
            "input_bytes": row.input_bytes,
            "output": "x".join(map(str, row.output_dims)),
            "output_bytes": row.output_bytes,
            "weight_bytes": row.weight_bytes,
            "passes": row.passes,
        }
        for row in bandwidth.rows
    ]
    return pd.DataFrame(records, columns=columns)


def render_report(report: EngineReport) -> str:
    """Human-readable form of both tables and the clock lines."""
    lines = ["Cycles", cycles_frame(report).to_string(index=False), f"Cycles per frame: {report.frame_cycles:,}", ""]
    totals = report.bandwidth.totals
    lines += [
        "Bandwidth",
        bandwidth_frame(report.bandwidth).to_string(index=False),
        f"Total bytes: input {totals.input_bytes:,}, output {totals.output_bytes:,}, weights {totals.weight_bytes:,}",
    ]
    if report.required_clock_hz is not None:
        lines.append(f"Required clock at {report.fps:g} fps: {report.required_clock_hz / 1e6:.1f} MHz ({report.required_clock_hz:,.0f} Hz)")
    if report.operations_per_clock is not None:
        lines.append(f"Operations per clock: {report.operations_per_clock:.1f}")
    return "\n".join(lines) + "\n"


def write_report(report: EngineReport, out_dir: str | Path) -> None:
    """Write report.json, report.txt and the two tables as CSV."""
    out_dir = Path(out_dir)
    atomic_write(out_dir / "report.json", report.model_dump_json(indent=2).encode())
    atomic_write(out_dir / "report.txt", render_report(report).encode())
    atomic_write(out_dir / "cycles.csv", cycles_frame(report).to_csv(index=False).encode())
    atomic_write(out_dir / "bandwidth.csv", bandwidth_frame(report.bandwidth).to_csv(index=False).encode())
    logger.info(f"Wrote report to {out_dir}")
