"""Tests for the command-line front end."""

import json
from unittest.mock import patch

import numpy as np
import pytest

from blmac_sim.cli import build_parser, main
from blmac_sim.codec import CompressedWeightStream, decode_all
from blmac_sim.config import CONFIG_DIR
from blmac_sim.network import load_network, load_streams, run_network, write_weights_file
from blmac_sim.runlength import EOR
from blmac_sim.tensor import FeatureMap, QuantizedWeightTensor, scale_accumulators
from tests.helpers import identity_tensor, random_fmap

IDENTITY = str(CONFIG_DIR / "identity.yaml")
QUIET = ["--log-level", "CRITICAL"]


def _cli(*args: str) -> int:
    return main([*QUIET, *args])


def _error(capsys) -> dict:
    return json.loads(capsys.readouterr().err)["error"]


@pytest.fixture
def identity_run(tmp_workspace, rng):
    """Identity weights compressed into streams/ and a random input map."""
    weights = tmp_workspace / "identity.bin"
    write_weights_file(weights, load_network(IDENTITY), {"identity": identity_tensor(1)})
    input_path = tmp_workspace / "input.fmap"
    random_fmap(rng, 8, 8, 1).save(input_path)
    assert _cli("compress", "--config", IDENTITY, "--weights", str(weights), "--int8", "--out", str(tmp_workspace / "streams")) == 0
    return tmp_workspace, input_path


@pytest.mark.unit
def test_identity_run_is_byte_exact(identity_run):
    """Compress W=1, run, and get the input bytes back."""
    workspace, input_path = identity_run
    streams = workspace / "streams"
    assert (streams / "identity.blws").exists()
    summary = json.loads((streams / "summary.json").read_text())
    assert summary[0]["name"] == "identity"
    assert summary[0]["n3_total"] == 1
    out = workspace / "out"
    assert _cli("run", "--config", IDENTITY, "--input", str(input_path), "--streams", str(streams), "--out", str(out), "--fps", "30") == 0
    assert (out / "identity.fmap").read_bytes() == input_path.read_bytes()
    report = json.loads((out / "report.json").read_text())
    assert report["layers"][0]["name"] == "identity"
    assert (out / "cycles.csv").exists()


@pytest.mark.unit
def test_missing_stream_names_the_layer(identity_run, capsys):
    workspace, input_path = identity_run
    (workspace / "streams" / "identity.blws").unlink()
    capsys.readouterr()
    code = _cli("run", "--config", IDENTITY, "--input", str(input_path), "--streams", str(workspace / "streams"), "--out", str(workspace / "out"))
    assert code == 2
    error = _error(capsys)
    assert error["code"] == "FORMAT_ERROR"
    assert error["details"]["layer"] == "identity"


@pytest.mark.unit
def test_corrupted_stream_fails(identity_run, capsys):
    workspace, input_path = identity_run
    stream = workspace / "streams" / "identity.blws"
    stream.write_bytes(stream.read_bytes()[:-1])
    capsys.readouterr()
    code = _cli("run", "--config", IDENTITY, "--input", str(input_path), "--streams", str(workspace / "streams"), "--out", str(workspace / "out"))
    assert code == 2
    assert _error(capsys)["code"] == "CORRUPT_STREAM"


@pytest.mark.unit
def test_dump_layer_index_checked(identity_run, capsys):
    workspace, input_path = identity_run
    capsys.readouterr()
    code = _cli(
        "run", "--config", IDENTITY, "--input", str(input_path), "--streams", str(workspace / "streams"), "--out", str(workspace / "out"), "--dump-layer", "5"
    )
    assert code == 3
    assert _error(capsys)["code"] == "CONFIG_ERROR"


@pytest.mark.unit
def test_missing_input_is_io_error(identity_run, capsys):
    workspace, _ = identity_run
    capsys.readouterr()
    code = _cli("run", "--config", IDENTITY, "--input", str(workspace / "absent.fmap"), "--streams", str(workspace / "streams"), "--out", str(workspace / "out"))
    assert code == 2
    assert _error(capsys)["code"] == "IO_ERROR"


@pytest.mark.unit
def test_verify_succeeds(capsys):
    assert _cli("verify", "--config", IDENTITY, "--seed", "3") == 0
    assert capsys.readouterr().out.startswith("OK")


@pytest.mark.unit
def test_verify_with_input_and_streams(identity_run, capsys):
    """Streams compressed from the weights file agree with the oracle on that file."""
    workspace, input_path = identity_run
    code = _cli(
        "verify", "--config", IDENTITY, "--input", str(input_path), "--weights", str(workspace / "identity.bin"), "--int8", "--streams", str(workspace / "streams")
    )
    assert code == 0


@pytest.mark.unit
def test_report(identity_run, capsys):
    workspace, _ = identity_run
    out = workspace / "report"
    assert _cli("report", "--config", IDENTITY, "--streams", str(workspace / "streams"), "--fps", "30", "--out", str(out)) == 0
    assert "Required clock at 30 fps" in capsys.readouterr().out
    assert (out / "bandwidth.csv").exists()


@pytest.mark.unit
def test_report_rejects_zero_fps(identity_run, capsys):
    workspace, _ = identity_run
    capsys.readouterr()
    assert _cli("report", "--config", IDENTITY, "--streams", str(workspace / "streams"), "--fps", "0") == 3
    assert _error(capsys)["code"] == "CONFIG_ERROR"


@pytest.mark.unit
def test_compress_from_seed(tmp_workspace):
    out = tmp_workspace / "streams"
    assert _cli("compress", "--config", IDENTITY, "--seed", "1", "--out", str(out)) == 0
    assert np.load(out / "identity.bias.npy").shape == (1,)


@pytest.mark.unit
def test_compress_needs_a_weight_source():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["compress", "--config", IDENTITY, "--out", "x"])


@pytest.mark.unit
def test_bad_config_exit_code(tmp_path, capsys):
    broken = tmp_path / "broken.yaml"
    broken.write_text("layers: [{name: a, kind: conv, k: 2, filters: 1}]\ninput: {x: 4, y: 4, z: 1}\n")
    capsys.readouterr()
    assert _cli("verify", "--config", str(broken)) == 3
    assert _error(capsys)["details"]["layer"] == "a"


@pytest.mark.unit
def test_fp_cycles(capsys):
    assert _cli("fp-cycles") == 0
    out = capsys.readouterr().out
    for name in ("half", "bfloat16", "tf32", "single"):
        assert name in out


@pytest.mark.unit
def test_serve_starts_uvicorn():
    """The serve command hands the app to uvicorn without blocking the test."""
    with patch("uvicorn.run") as mock_run:
        assert _cli("serve", "--host", "127.0.0.1", "--port", "9999") == 0
    mock_run.assert_called_once_with("blmac_sim.app:app", host="127.0.0.1", port=9999)


@pytest.mark.unit
def test_feature_map_written_by_run_is_loadable(identity_run):
    workspace, input_path = identity_run
    out = workspace / "out"
    _cli("run", "--config", IDENTITY, "--input", str(input_path), "--streams", str(workspace / "streams"), "--out", str(out), "--dump-layer", "0")
    assert FeatureMap.load(out / "identity.fmap").dims == (8, 8, 1)


@pytest.fixture
def zero_weights(tmp_workspace):
    """Identity network with every weight zero and a bias of 5."""
    path = tmp_workspace / "zero.bin"
    zero = QuantizedWeightTensor.from_arrays(np.zeros((1, 1, 1, 1)), biases=[5])
    write_weights_file(path, load_network(IDENTITY), {"identity": zero})
    return path


@pytest.mark.unit
def test_compress_all_zero_weights_is_eor_only(tmp_workspace, zero_weights):
    out = tmp_workspace / "streams"
    assert _cli("compress", "--config", IDENTITY, "--weights", str(zero_weights), "--int8", "--out", str(out)) == 0
    plans = decode_all(CompressedWeightStream.load(out / "identity.blws"))
    assert all(layer == (EOR,) for plan in plans for layer in plan.layers)
    summary = json.loads((out / "summary.json").read_text())
    assert summary[0]["n3_total"] == 0


@pytest.mark.unit
def test_all_zero_weights_output_the_scaled_bias(tmp_workspace, zero_weights, rng):
    input_path = tmp_workspace / "input.fmap"
    random_fmap(rng, 8, 8, 1).save(input_path)
    streams = tmp_workspace / "streams"
    assert _cli("verify", "--config", IDENTITY, "--input", str(input_path), "--weights", str(zero_weights), "--int8") == 0
    assert _cli("compress", "--config", IDENTITY, "--weights", str(zero_weights), "--int8", "--out", str(streams)) == 0
    out = tmp_workspace / "out"
    assert _cli("run", "--config", IDENTITY, "--input", str(input_path), "--streams", str(streams), "--out", str(out)) == 0
    layer = load_network(IDENTITY).layers[0]
    expected = scale_accumulators(np.zeros((8, 1, 8), dtype=np.int64), np.array([5]), layer.scale_params())
    assert np.array_equal(FeatureMap.load(out / "identity.fmap").data, expected.data)


@pytest.mark.unit
def test_run_output_file_matches_in_memory_run(identity_run):
    workspace, input_path = identity_run
    out = workspace / "out"
    assert _cli("run", "--config", IDENTITY, "--input", str(input_path), "--streams", str(workspace / "streams"), "--out", str(out)) == 0
    cfg = load_network(IDENTITY)
    streams, biases = load_streams(workspace / "streams", cfg)
    outputs, report = run_network(cfg, FeatureMap.load(input_path), streams, biases)
    assert (out / "identity.fmap").read_bytes() == outputs["identity"].to_bytes()
    written = json.loads((out / "report.json").read_text())
    assert written["frame_cycles"] == report.frame_cycles
    assert [row["cycles_per_map"] for row in written["layers"]] == [row.cycles_per_map for row in report.layers]


@pytest.mark.unit
def test_run_rejects_bad_config_before_reading_files(tmp_path, capsys):
    """A broken config fails with a config error even when no input or streams exist."""
    broken = tmp_path / "broken.yaml"
    broken.write_text("layers: [{name: a, kind: conv, k: 2, filters: 1}]\ninput: {x: 4, y: 4, z: 1}\n")
    capsys.readouterr()
    code = _cli("run", "--config", str(broken), "--input", str(tmp_path / "absent.fmap"), "--streams", str(tmp_path / "nowhere"), "--out", str(tmp_path / "out"))
    assert code == 3
    error = _error(capsys)
    assert error["code"] == "CONFIG_ERROR"
    assert error["details"]["layer"] == "a"
