"""Network configs: loading, dimension-chain validation and layer-stack execution."""

import io
from collections.abc import Mapping
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from loguru import logger
from pydantic import BaseModel, Field, ValidationError

from blmac_sim.codec import CompressedWeightStream, compress_plans
from blmac_sim.config import BlmacSimConfig
from blmac_sim.engine import arrange_tiles, run_layer_blmac, run_layer_mac, run_layer_reference
from blmac_sim.errors import BlmacSimError, ConfigurationError, FormatError, VerificationMismatchError
from blmac_sim.models import Dims, EngineOptions, EngineReport, LayerKind, LayerReport, LayerSpec, OverheadParams, ScaleParams
from blmac_sim.perf import bandwidth_report, finish_report
from blmac_sim.runlength import FlattenOrder
from blmac_sim.signed_digit import build_layer_plans
from blmac_sim.tensor import FeatureMap, QuantizedWeightTensor, atomic_write, concat_z, maxpool2x2, quantize_weights_uniform, upsample2x

OPTION_SETTINGS = {
    "acc_bits": "BLMAC_ACC_BITS",
    "array_width": "BLMAC_ARRAY_WIDTH",
    "tile_width": "BLMAC_TILE_WIDTH",
    "cache_bytes": "BLMAC_CACHE_BYTES",
    "mem_bytes_per_cycle": "BLMAC_MEM_BYTES_PER_CYCLE",
    "weight_load_bytes_per_cycle": "BLMAC_WEIGHT_LOAD_BYTES_PER_CYCLE",
    "overhead_fraction": "BLMAC_OVERHEAD_FRACTION",
    "row_overhead_cycles": "BLMAC_ROW_OVERHEAD_CYCLES",
    "slice_overhead_cycles": "BLMAC_SLICE_OVERHEAD_CYCLES",
    "exact_check": "BLMAC_EXACT_CHECK",
}


class InputShape(BaseModel):
    x: int = Field(..., ge=1)
    y: int = Field(..., ge=1)
    z: int = Field(..., ge=1)


class LeakyConfig(BaseModel):
    num: int = 26
    shift: int = 8


class LayerConfig(BaseModel):
    """One stanza of the ``layers:`` list."""

    name: str
    kind: LayerKind
    k: int = 3
    filters: int = 0
    z: int | None = None
    frac_bits: int = Field(0, ge=0)
    leaky: LeakyConfig = Field(default_factory=LeakyConfig)
    linear: bool = False
    out_mult: int = 1
    out_shift: int | None = Field(None, ge=0, description="Defaults to frac_bits.")
    fuse_maxpool: Literal[1, 2] | None = None
    sparsity: float = Field(0.5, ge=0.0, le=1.0)
    order: Literal["izj", "zij"] = "izj"
    stride: Literal[1, 2] = 2
    sources: list[str] = Field(default_factory=list)

    def scale_params(self) -> ScaleParams:
        return ScaleParams(
            leaky_num=self.leaky.num,
            leaky_shift=self.leaky.shift,
            out_mult=self.out_mult,
            out_shift=self.frac_bits if self.out_shift is None else self.out_shift,
            activation="linear" if self.linear else "leaky",
        )

    @property
    def flatten_order(self) -> FlattenOrder:
        return FlattenOrder[self.order.upper()]


class NetworkConfig(BaseModel):
    input: InputShape
    options: dict[str, float | int | bool] = Field(default_factory=dict)
    layers: list[LayerConfig] = Field(default_factory=list)

    def conv_layers(self) -> list[LayerConfig]:
        return [layer for layer in self.layers if layer.kind == LayerKind.CONV]


def load_network(path: str | Path) -> NetworkConfig:
    """Parse a network YAML file; raises ConfigurationError on schema errors."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigurationError(f"network config {path} is not valid YAML: {e}") from e
    except OSError as e:
        raise ConfigurationError(f"cannot read network config {path}: {e}") from e
    return parse_network(raw)


def parse_network(raw: dict | None) -> NetworkConfig:
    try:
        cfg = NetworkConfig.model_validate(raw or {})
    except ValidationError as e:
        raise ConfigurationError(f"invalid network config: {e.errors()[0]['msg']}", {"location": [str(p) for p in e.errors()[0]['loc']]}) from e
    unknown = set(cfg.options) - set(OPTION_SETTINGS)
    if unknown:
        raise ConfigurationError(f"unknown network options: {sorted(unknown)}")
    return cfg


def resolve_settings(cfg: NetworkConfig, settings: BlmacSimConfig | None = None) -> BlmacSimConfig:
    """Settings with the network's ``options:`` applied on top."""
    settings = settings or BlmacSimConfig()
    return settings.model_copy(update={OPTION_SETTINGS[key]: value for key, value in cfg.options.items()})


def validate_network(cfg: NetworkConfig, array_width: int = 416) -> list[LayerSpec]:
    """Check the dims chain layer by layer and return one spec per stanza."""
    dims: Dims = (cfg.input.x, cfg.input.y, cfg.input.z)
    produced: dict[str, Dims] = {}
    specs = []
    for index, layer in enumerate(cfg.layers):
        where = {"layer": layer.name, "index": index}
        if layer.name in produced:
            raise ConfigurationError(f"duplicate layer name {layer.name}", where)
        x, y, z = dims
        if layer.kind == LayerKind.CONV:
            if layer.k < 1 or layer.k % 2 == 0:
                raise ConfigurationError(f"layer {index} ({layer.name}): kernel size must be odd, got {layer.k}", where)
            if layer.filters < 1:
                raise ConfigurationError(f"layer {index} ({layer.name}): filters must be positive", where)
            if layer.z is not None and layer.z != z:
                raise ConfigurationError(f"layer {index} ({layer.name}): declares Z={layer.z} but its input has {z} channels", where)
            if x > array_width:
                raise ConfigurationError(f"layer {index} ({layer.name}): line width {x} exceeds the {array_width}-wide array", where)
            try:
                layer.scale_params()
            except ValidationError as e:
                raise ConfigurationError(f"layer {index} ({layer.name}): {e.errors()[0]['msg']}", where) from e
            pooled = layer.fuse_maxpool is not None
            out = (x // 2, y // 2, layer.filters) if layer.fuse_maxpool == 2 else (x, y, layer.filters)
            spec = LayerSpec(
                name=layer.name, kind=layer.kind, k=layer.k, z=z, o=layer.filters, input_dims=dims, output_dims=out,
                fused_maxpool=pooled, pool_stride=layer.fuse_maxpool or 2,
            )
        elif layer.kind == LayerKind.MAXPOOL:
            out = (x // 2, y // 2, z) if layer.stride == 2 else dims
            spec = LayerSpec(name=layer.name, kind=layer.kind, input_dims=dims, output_dims=out, pool_stride=layer.stride)
        elif layer.kind == LayerKind.UPSAMPLE:
            spec = LayerSpec(name=layer.name, kind=layer.kind, input_dims=dims, output_dims=(2 * x, 2 * y, z))
        else:
            if not layer.sources:
                raise ConfigurationError(f"layer {index} ({layer.name}): route needs at least one source", where)
            missing = [s for s in layer.sources if s not in produced]
            if missing:
                raise ConfigurationError(f"layer {index} ({layer.name}): route sources {missing} are not earlier layers", where)
            source_dims = [produced[s] for s in layer.sources]
            if len({d[:2] for d in source_dims}) != 1:
                raise ConfigurationError(f"layer {index} ({layer.name}): route sources have different X/Y {source_dims}", where)
            routed = (source_dims[0][0], source_dims[0][1], sum(d[2] for d in source_dims))
            spec = LayerSpec(name=layer.name, kind=layer.kind, input_dims=routed, output_dims=routed, sources=list(layer.sources))
        produced[layer.name] = spec.output_dims
        dims = spec.output_dims
        specs.append(spec)
    return specs


def layer_specs(cfg: NetworkConfig, array_width: int = 416) -> list[LayerSpec]:
    """Specs for reporting: a conv directly followed by a maxpool is counted with the pool fused."""
    specs = validate_network(cfg, array_width)
    merged = []
    for index, spec in enumerate(specs):
        following = specs[index + 1] if index + 1 < len(specs) else None
        if spec.kind == LayerKind.CONV and not spec.fused_maxpool and following is not None and following.kind == LayerKind.MAXPOOL:
            spec = spec.model_copy(update={"fused_maxpool": True, "pool_stride": following.pool_stride, "output_dims": following.output_dims})
        merged.append(spec)
    return merged


def random_weights(cfg: NetworkConfig, seed: int) -> dict[str, QuantizedWeightTensor]:
    """Sparse uniformly quantized weights for every conv layer, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for spec, layer in zip(validate_network(cfg, max(cfg.input.x, 1 << 30)), cfg.layers, strict=True):
        if spec.kind != LayerKind.CONV:
            continue
        shape = (spec.k, spec.k, spec.z, spec.o)
        float_weights = rng.normal(0.0, 1.0 / np.sqrt(spec.k * spec.k * spec.z), size=shape)
        float_weights[rng.random(shape) < layer.sparsity] = 0.0
        biases = rng.normal(0.0, 0.5, size=spec.o)
        tensors[spec.name] = quantize_weights_uniform(float_weights, layer.frac_bits, biases)
    return tensors


def random_input(cfg: NetworkConfig, seed: int) -> FeatureMap:
    rng = np.random.default_rng(seed)
    return FeatureMap(rng.integers(-128, 128, size=(cfg.input.y, cfg.input.z, cfg.input.x), dtype=np.int8))


def compress_weights(cfg: NetworkConfig, tensors: Mapping[str, QuantizedWeightTensor]) -> dict[str, CompressedWeightStream]:
    streams = {}
    for layer in cfg.conv_layers():
        w = tensors[layer.name]
        plans = build_layer_plans(w, layer.flatten_order)
        streams[layer.name] = compress_plans(plans, k=w.k, z_dim=w.z)
    return streams


# --- Weight and stream files ---


def read_weights_file(path: str | Path, cfg: NetworkConfig, int8: bool = False) -> dict[str, QuantizedWeightTensor]:
    """Read every conv layer, in config order, from one raw little-endian file.

    Each layer holds K*K*Z*O weights with j varying fastest, then i, z and o, followed
    by O biases. Float files hold float32 values quantized with the layer's
    ``frac_bits``; integer files hold int8 weights and int32 biases.
    """
    blob = Path(path).read_bytes()
    offset = 0
    tensors = {}
    for spec in validate_network(cfg, max(cfg.input.x, 1 << 30)):
        if spec.kind != LayerKind.CONV:
            continue
        count = spec.k * spec.k * spec.z * spec.o
        w_dtype, b_dtype = (np.dtype("<i1"), np.dtype("<i4")) if int8 else (np.dtype("<f4"), np.dtype("<f4"))
        needed = count * w_dtype.itemsize + spec.o * b_dtype.itemsize
        if offset + needed > len(blob):
            raise ConfigurationError(f"weights file {path} ends inside layer {spec.name}", {"layer": spec.name, "size": len(blob)})
        raw_w = np.frombuffer(blob, dtype=w_dtype, count=count, offset=offset).reshape(spec.o, spec.z, spec.k, spec.k)
        offset += count * w_dtype.itemsize
        raw_b = np.frombuffer(blob, dtype=b_dtype, count=spec.o, offset=offset)
        offset += spec.o * b_dtype.itemsize
        weights = raw_w.transpose(3, 2, 1, 0)
        frac_bits = next(layer.frac_bits for layer in cfg.layers if layer.name == spec.name)
        if int8:
            tensors[spec.name] = QuantizedWeightTensor(weights.astype(np.int64), raw_b.astype(np.int64), frac_bits)
        else:
            tensors[spec.name] = quantize_weights_uniform(weights.astype(np.float64), frac_bits, raw_b.astype(np.float64))
    if offset != len(blob):
        raise ConfigurationError(f"weights file {path} holds {len(blob) - offset} bytes beyond the last conv layer")
    return tensors


def write_weights_file(path: str | Path, cfg: NetworkConfig, tensors: Mapping[str, QuantizedWeightTensor]) -> None:
    """Write integer tensors in the int8 layout read by :func:`read_weights_file`."""
    chunks = []
    for layer in cfg.conv_layers():
        w = tensors[layer.name]
        if np.abs(w.weights).max(initial=0) > 127:
            raise ConfigurationError(f"layer {layer.name} has weights outside the int8 range")
        chunks.append(w.weights.transpose(3, 2, 1, 0).astype("<i1").tobytes())
        chunks.append(w.biases.astype("<i4").tobytes())
    atomic_write(Path(path), b"".join(chunks))


def save_streams(out_dir: str | Path, streams: Mapping[str, CompressedWeightStream], tensors: Mapping[str, QuantizedWeightTensor]) -> None:
    """One ``<name>.blws`` stream and one ``<name>.bias.npy`` file per conv layer."""
    out_dir = Path(out_dir)
    for name, stream in streams.items():
        stream.save(out_dir / f"{name}.blws")
        buffer = io.BytesIO()
        np.save(buffer, tensors[name].biases.astype(np.int64))
        atomic_write(out_dir / f"{name}.bias.npy", buffer.getvalue())


def load_streams(streams_dir: str | Path, cfg: NetworkConfig, with_biases: bool = True) -> tuple[dict[str, CompressedWeightStream], dict[str, np.ndarray]]:
    streams_dir = Path(streams_dir)
    streams, biases = {}, {}
    for layer in cfg.conv_layers():
        path = streams_dir / f"{layer.name}.blws"
        if not path.exists():
            raise FormatError(f"missing weight stream for layer {layer.name}: {path}", {"layer": layer.name})
        streams[layer.name] = CompressedWeightStream.load(path)
        if with_biases:
            bias_path = streams_dir / f"{layer.name}.bias.npy"
            if not bias_path.exists():
                raise FormatError(f"missing biases for layer {layer.name}: {bias_path}", {"layer": layer.name})
            try:
                biases[layer.name] = np.load(bias_path, allow_pickle=False)
            except ValueError as e:
                raise FormatError(f"unreadable bias file {bias_path}: {e}", {"layer": layer.name}) from e
    return streams, biases


# --- Execution ---


def _host_layer(layer: LayerConfig, current: FeatureMap, outputs: Mapping[str, FeatureMap]) -> FeatureMap:
    if layer.kind == LayerKind.MAXPOOL:
        return maxpool2x2(current, layer.stride)
    if layer.kind == LayerKind.UPSAMPLE:
        return upsample2x(current)
    routed = outputs[layer.sources[0]]
    for source in layer.sources[1:]:
        routed = concat_z(routed, outputs[source])
    return routed


def run_network(
    cfg: NetworkConfig,
    input_map: FeatureMap,
    streams: Mapping[str, CompressedWeightStream],
    biases: Mapping[str, np.ndarray],
    *,
    settings: BlmacSimConfig | None = None,
    fps: float | None = None,
) -> tuple[dict[str, FeatureMap], EngineReport]:
    """Execute the stack on the BLMAC engine; returns every layer's output and the report."""
    settings = resolve_settings(cfg, settings)
    specs = validate_network(cfg, settings.BLMAC_ARRAY_WIDTH)
    if input_map.dims != (cfg.input.x, cfg.input.y, cfg.input.z):
        raise ConfigurationError(f"input map dims {input_map.dims} do not match the config input {(cfg.input.x, cfg.input.y, cfg.input.z)}")
    options = EngineOptions.from_config(settings)
    outputs: dict[str, FeatureMap] = {}
    reports = []
    current = input_map
    for index, (layer, spec) in enumerate(zip(cfg.layers, specs, strict=True)):
        try:
            if layer.kind == LayerKind.CONV:
                stream = streams.get(layer.name)
                if stream is None:
                    raise FormatError(f"no weight stream for layer {layer.name}", {"layer": layer.name})
                if (stream.k, stream.z, stream.o) != (spec.k, spec.z, spec.o):
                    raise ConfigurationError(f"stream dims K={stream.k} Z={stream.z} O={stream.o} do not match layer {layer.name}")
                arrange = arrange_tiles(current.dims_x, settings.BLMAC_ARRAY_WIDTH, settings.BLMAC_TILE_WIDTH)
                result = run_layer_blmac(current, stream, biases[layer.name], layer.scale_params(), arrange, options.model_copy(update={"fuse_maxpool": layer.fuse_maxpool}))
                current = result.output
                reports.append(
                    LayerReport(
                        name=spec.name, kind=spec.kind, kernel=spec.kernel_label, input_dims=spec.input_dims, output_dims=spec.computed_dims,
                        macs_per_kernel=spec.macs_per_kernel, cycles_per_slice=max(result.cycles_per_slice, default=0),
                        cycles_per_map=result.cycles_map, cycles_per_kernel=result.cycles_per_kernel, decode_steps=result.decode_steps,
                        n_b=result.n_b, n3_total=result.n3_total, weight_bytes=stream.size_bytes, peak_resident_pixels=result.peak_resident_pixels,
                    )
                )
                logger.info(f"Layer {index} ({layer.name}): {result.cycles_map} cycles/map, {result.decode_steps} decode steps")
            else:
                current = _host_layer(layer, current, outputs)
                reports.append(LayerReport(name=spec.name, kind=spec.kind, kernel=spec.kernel_label, input_dims=spec.input_dims, output_dims=spec.output_dims))
        except BlmacSimError as e:
            e.details.setdefault("layer", layer.name)
            e.details.setdefault("index", index)
            raise
        outputs[layer.name] = current
    bandwidth = bandwidth_report(layer_specs(cfg, settings.BLMAC_ARRAY_WIDTH), {name: s.size_bytes for name, s in streams.items()}, settings.BLMAC_CACHE_BYTES)
    report = finish_report(reports, bandwidth, specs, fps=fps, weight_load_bytes_per_cycle=settings.BLMAC_WEIGHT_LOAD_BYTES_PER_CYCLE)
    return outputs, report


def first_mismatch(expected: FeatureMap, actual: FeatureMap) -> dict | None:
    """Coordinates and values of the first differing pixel, or None when the maps agree."""
    if expected.dims != actual.dims:
        return {"expected_dims": expected.dims, "actual_dims": actual.dims}
    diff = np.argwhere(expected.data != actual.data)
    if diff.size == 0:
        return None
    y, z, x = (int(v) for v in diff[0])
    return {"x": x, "y": y, "z": z, "expected": expected.pixel(x, y, z), "actual": actual.pixel(x, y, z)}


class VerificationResult(BaseModel):
    layers_checked: int
    conv_layers: int
    output_dims: Dims


def verify_network(
    cfg: NetworkConfig,
    input_map: FeatureMap,
    tensors: Mapping[str, QuantizedWeightTensor],
    *,
    streams: Mapping[str, CompressedWeightStream] | None = None,
    settings: BlmacSimConfig | None = None,
) -> VerificationResult:
    """Run oracle, MAC array and BLMAC array layer by layer; raise on the first disagreement."""
    settings = resolve_settings(cfg, settings)
    validate_network(cfg, settings.BLMAC_ARRAY_WIDTH)
    streams = streams if streams is not None else compress_weights(cfg, tensors)
    options = EngineOptions.from_config(settings)
    outputs: dict[str, FeatureMap] = {}
    current = input_map
    for index, layer in enumerate(cfg.layers):
        if layer.kind != LayerKind.CONV:
            current = _host_layer(layer, current, outputs)
            outputs[layer.name] = current
            continue
        w = tensors[layer.name]
        scale = layer.scale_params()
        layer_options = options.model_copy(update={"fuse_maxpool": layer.fuse_maxpool})
        arrange = arrange_tiles(current.dims_x, settings.BLMAC_ARRAY_WIDTH, settings.BLMAC_TILE_WIDTH)
        expected = run_layer_reference(current, w, scale, layer.fuse_maxpool)
        try:
            if layer.name not in streams:
                raise FormatError(f"no weight stream for layer {layer.name}")
            mac = run_layer_mac(current, w, scale, arrange, layer_options, layer.flatten_order).output
            blmac = run_layer_blmac(current, streams[layer.name], w.biases, scale, arrange, layer_options).output
        except BlmacSimError as e:
            e.details.setdefault("layer", layer.name)
            e.details.setdefault("index", index)
            raise
        for path, actual in (("mac", mac), ("blmac", blmac)):
            mismatch = first_mismatch(expected, actual)
            if mismatch is not None:
                raise VerificationMismatchError(f"layer {index} ({layer.name}): {path} array disagrees with the oracle", {"layer": layer.name, "array": path, **mismatch})
        logger.info(f"Layer {index} ({layer.name}): oracle, MAC and BLMAC agree on {expected.dims}")
        current = expected
        outputs[layer.name] = current
    return VerificationResult(layers_checked=len(cfg.layers), conv_layers=len(cfg.conv_layers()), output_dims=current.dims)


def overhead_from_settings(settings: BlmacSimConfig) -> OverheadParams:
    return OverheadParams(fraction=settings.BLMAC_OVERHEAD_FRACTION, row_cycles=settings.BLMAC_ROW_OVERHEAD_CYCLES, slice_cycles=settings.BLMAC_SLICE_OVERHEAD_CYCLES)
