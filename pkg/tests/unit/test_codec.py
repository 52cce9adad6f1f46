"""Tests for the range coder and the BLWS weight stream."""

import numpy as np
import pytest

from blmac_sim.codec import (
    BINS_PER_CONTEXT,
    PROB_HALF,
    PROB_MAX,
    PROB_MIN,
    STREAM_HEADER,
    CompressedWeightStream,
    ProbabilityModel,
    RangeDecoder,
    RangeEncoder,
    _layer_bins,
    ac_decode,
    ac_encode,
    compress_plans,
    decode_all,
    decode_plan,
    encode_plan,
    estimate_model,
    prefix_bin,
)
from blmac_sim.errors import ConfigurationError, CorruptStreamError, FormatError
from blmac_sim.runlength import EOR, FlattenOrder, RunSymbol
from blmac_sim.signed_digit import build_layer_plan, build_layer_plans
from tests.helpers import column_tensor, sparse_weights

pytestmark = pytest.mark.unit


def _stream(rng, k=3, z=4, o=6, sparsity=0.6, order=FlattenOrder.IZJ) -> tuple[list, CompressedWeightStream]:
    w = sparse_weights(rng, k=k, z=z, o=o, sparsity=sparsity)
    plans = build_layer_plans(w, order)
    return plans, compress_plans(plans, k=k, z_dim=z)


def test_range_coder_round_trip(rng):
    """Random adaptive-probability and bypass bits survive encode/decode, including carries."""
    for _ in range(20):
        n = int(rng.integers(1, 2000))
        bits = rng.integers(0, 2, size=n).tolist()
        probs = rng.integers(PROB_MIN, PROB_MAX + 1, size=n).tolist()
        bypass = (rng.random(n) < 0.3).tolist()
        encoder = RangeEncoder()
        for bit, p1, raw in zip(bits, probs, bypass, strict=True):
            if raw:
                encoder.encode_bypass(bit)
            else:
                encoder.encode_bit(bit, p1)
        decoder = RangeDecoder(encoder.finish())
        decoded = [decoder.decode_bypass() if raw else decoder.decode_bit(p1) for p1, raw in zip(probs, bypass, strict=True)]
        assert decoded == bits


def test_prefix_bins_saturate():
    assert prefix_bin(0) == 1
    assert prefix_bin(15) == 16
    assert prefix_bin(40) == 16


def test_layer_binarization_and_contexts():
    """Context 0 until the first run of a layer, context 1 after; suffix and sign bypass."""
    layer = (RunSymbol.run(0, 1), RunSymbol.run(2, -1), EOR)
    assert list(_layer_bins(layer)) == [
        (0, 0, 0),
        (0, 1, 0),
        (None, 0, 0),
        (1, 0, 0),
        (1, 1, 1),
        (1, 2, 0),
        (None, 0, 1),
        (None, 0, 1),
        (1, 0, 1),
    ]
    assert list(_layer_bins((EOR,))) == [(0, 0, 1)]


def test_all_zero_plan_costs_no_bytes():
    """An all-EOR plan under the uniform model flushes to an empty payload."""
    plan = build_layer_plan(column_tensor([0] * 9), 0)
    payload = encode_plan(plan, ProbabilityModel.uniform())
    assert len(payload) <= 2
    assert decode_plan(payload, ProbabilityModel.uniform(), 0, plan.n_b, plan.flatten_len, plan.order) == plan


def test_single_column_round_trip():
    plan = build_layer_plan(column_tensor([3, 0, -1]), 0)
    for model in (ProbabilityModel.uniform(), estimate_model([plan])):
        payload = encode_plan(plan, model)
        assert decode_plan(payload, model, 0, plan.n_b, plan.flatten_len, plan.order) == plan


@pytest.mark.parametrize("order", list(FlattenOrder))
def test_stream_round_trip(rng, order):
    """Every column decodes back to its plan, under both flatten orders."""
    plans, stream = _stream(rng, order=order)
    assert stream.order == order
    assert decode_all(stream) == plans
    restored = CompressedWeightStream.from_bytes(stream.to_bytes())
    assert restored == stream
    assert decode_all(restored) == plans


def test_columns_decode_independently(rng):
    plans, stream = _stream(rng, o=8)
    for o in (7, 0, 3):
        plan, steps = ac_decode(stream, o)
        assert plan == plans[o]
        assert steps == plans[o].n3 + plans[o].n_b


def test_stream_layout(rng, tmp_path):
    """18-byte header, 70-byte model, O+1 offsets, then the payload."""
    plans, stream = _stream(rng, k=3, z=2, o=5)
    blob = stream.to_bytes()
    assert STREAM_HEADER.size == 18
    assert blob[:4] == b"BLWS"
    assert int.from_bytes(blob[4:6], "little") == 1
    assert int.from_bytes(blob[6:8], "little") == 3
    assert int.from_bytes(blob[8:12], "little") == 2
    assert int.from_bytes(blob[12:16], "little") == 5
    assert blob[16] == stream.n_b
    assert blob[17] == 0
    assert len(blob) == 18 + 70 + 4 * 6 + stream.payload_bytes
    assert stream.offsets[0] == 0
    assert stream.offsets[-1] == stream.payload_bytes
    path = tmp_path / "layer.blws"
    stream.save(path)
    assert CompressedWeightStream.load(path) == stream


def test_truncated_stream_is_corrupt(rng):
    _, stream = _stream(rng)
    blob = stream.to_bytes()
    assert stream.payload_bytes > 0
    with pytest.raises(CorruptStreamError) as exc:
        CompressedWeightStream.from_bytes(blob[:-1])
    assert exc.value.code == "CORRUPT_STREAM"
    with pytest.raises(CorruptStreamError):
        CompressedWeightStream.from_bytes(blob[: STREAM_HEADER.size + 70 + 3])


def test_garbage_payload_overruns_kernel():
    with pytest.raises(CorruptStreamError) as exc:
        decode_plan(b"\xff" * 8, ProbabilityModel.uniform(), 0, 1, 1, FlattenOrder.IZJ)
    assert exc.value.details["o"] == 0


def test_trailing_byte_after_last_layer_is_corrupt(rng):
    """A zero byte after the flush leaves the decode path unchanged but misses the end."""
    plans, stream = _stream(rng)
    for plan in plans:
        payload = stream.payload_for(plan.o) + b"\x00"
        with pytest.raises(CorruptStreamError) as exc:
            decode_plan(payload, stream.model, plan.o, stream.n_b, stream.flatten_len, stream.order)
        assert exc.value.details["o"] == plan.o
        assert exc.value.details["expected_bytes"] == len(payload) - 1


def test_padded_column_rejected_by_ac_decode(rng):
    plans, stream = _stream(rng)
    cut = stream.offsets[1]
    padded = CompressedWeightStream(
        k=stream.k,
        z=stream.z,
        o=stream.o,
        n_b=stream.n_b,
        order=stream.order,
        model=stream.model,
        offsets=(0, *(offset + 1 for offset in stream.offsets[1:])),
        payload=stream.payload[:cut] + b"\x00" + stream.payload[cut:],
    )
    with pytest.raises(CorruptStreamError) as exc:
        ac_decode(padded, 0)
    assert exc.value.details["byte_offset"] == cut + 1
    assert [ac_decode(padded, o)[0] for o in range(1, stream.o)] == plans[1:]


def test_truncated_payload_never_decodes_to_its_plan(rng):
    """Cutting bytes off a column either fails or leaves the canonical payload of another plan."""
    plans, stream = _stream(rng, z=8, o=8, sparsity=0.3)
    rejected = 0
    for plan in plans:
        payload = stream.payload_for(plan.o)
        assert len(payload) > 1
        for cut in range(1, len(payload) + 1):
            try:
                decoded = decode_plan(payload[:-cut], stream.model, plan.o, stream.n_b, stream.flatten_len, stream.order)
            except CorruptStreamError:
                rejected += 1
                continue
            assert decoded != plan, f"o={plan.o} cut={cut}"
            assert encode_plan(decoded, stream.model) == payload[:-cut]
    assert rejected > 0


def test_decoder_finish_accepts_every_flush_length():
    """Payloads of zero to several bytes end exactly where the decoder expects."""
    for values in ([0] * 9, [1], [3, 0, -1], [127, -127, 85, -43, 1, 0, 0, 2, 64]):
        plan = build_layer_plan(column_tensor(values), 0)
        payload = encode_plan(plan, ProbabilityModel.uniform())
        assert decode_plan(payload, ProbabilityModel.uniform(), 0, plan.n_b, plan.flatten_len, plan.order) == plan


def test_bad_headers_rejected(rng):
    _, stream = _stream(rng)
    blob = bytearray(stream.to_bytes())
    with pytest.raises(FormatError):
        CompressedWeightStream.from_bytes(b"BLWS")
    bad_magic = bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        CompressedWeightStream.from_bytes(bad_magic)
    bad_version = bytearray(blob)
    bad_version[4] = 9
    with pytest.raises(FormatError):
        CompressedWeightStream.from_bytes(bytes(bad_version))
    bad_order = bytearray(blob)
    bad_order[17] = 7
    with pytest.raises(FormatError):
        CompressedWeightStream.from_bytes(bytes(bad_order))


def test_estimate_model_clamps():
    """With no runs at all, the EOR bin saturates at the clamp and unseen bins stay at one half."""
    plans = build_layer_plans(column_tensor([0, 0, 0, 0]))
    model = estimate_model(plans)
    assert model.p1(0, 0) == PROB_MAX
    assert model.p1(1, 0) == PROB_HALF
    assert all(model.p1(c, b) == PROB_HALF for c in (0, 1) for b in range(1, BINS_PER_CONTEXT))


def test_model_serialization(rng):
    plans, _ = _stream(rng)
    model = estimate_model(plans)
    restored, end = ProbabilityModel.from_bytes(b"pad" + model.to_bytes(), 3)
    assert restored == model
    assert end == 3 + 70
    with pytest.raises(FormatError):
        ProbabilityModel.from_bytes(model.to_bytes()[:10])
    with pytest.raises(ConfigurationError):
        ProbabilityModel(((0,) * BINS_PER_CONTEXT, (PROB_HALF,) * BINS_PER_CONTEXT))


def test_fitted_model_beats_uniform(rng):
    w = sparse_weights(rng, k=3, z=16, o=64, sparsity=0.8)
    plans = build_layer_plans(w)
    fitted = ac_encode(plans, estimate_model(plans), k=3, z_dim=16)
    uniform = ac_encode(plans, ProbabilityModel.uniform(), k=3, z_dim=16)
    assert fitted.payload_bytes <= uniform.payload_bytes


def test_sparse_layer_compresses_below_raw(rng):
    """100 columns of 90% sparse int8 weights take fewer bytes than one byte per weight."""
    w = sparse_weights(rng, k=3, z=8, o=100, sparsity=0.9)
    stream = compress_plans(build_layer_plans(w), k=3, z_dim=8)
    assert stream.size_bytes < 3 * 3 * 8 * 100


def test_ac_encode_validates_plans(rng):
    w = sparse_weights(rng, k=3, z=2, o=2)
    plans = build_layer_plans(w)
    model = ProbabilityModel.uniform()
    with pytest.raises(ConfigurationError):
        ac_encode([], model, k=3, z_dim=2)
    with pytest.raises(ConfigurationError):
        ac_encode(plans, model, k=3, z_dim=3)
    with pytest.raises(ConfigurationError):
        ac_encode(plans[::-1], model, k=3, z_dim=2)
    stream = ac_encode(plans, model, k=3, z_dim=2)
    with pytest.raises(ConfigurationError):
        ac_decode(stream, 2)


def test_decode_steps_scale_with_density(rng):
    sparse = compress_plans(build_layer_plans(sparse_weights(rng, k=3, z=4, o=4, sparsity=0.9)), k=3, z_dim=4)
    dense = compress_plans(build_layer_plans(sparse_weights(rng, k=3, z=4, o=4, sparsity=0.0)), k=3, z_dim=4)
    assert sum(ac_decode(sparse, o)[1] for o in range(4)) < sum(ac_decode(dense, o)[1] for o in range(4))
    assert np.all(np.asarray(dense.offsets[1:]) >= np.asarray(dense.offsets[:-1]))
