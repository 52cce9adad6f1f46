"""Tests for the error handling module."""

import pytest

from blmac_sim.errors import (
    AccumulatorOverflowError,
    BlmacSimError,
    ConfigurationError,
    CorruptStreamError,
    FormatError,
    ProtocolError,
    VerificationMismatchError,
    create_error_result,
    exit_code_for,
)

pytestmark = pytest.mark.unit


def test_base_error():
    """Test the base error class."""
    error = BlmacSimError("Test error")
    assert str(error) == "Test error"
    assert error.code == "INTERNAL_ERROR"
    assert error.details == {}

    error_with_details = BlmacSimError("Test error", "TEST_CODE", {"key": "value"})
    assert str(error_with_details) == "Test error"
    assert error_with_details.code == "TEST_CODE"
    assert error_with_details.details == {"key": "value"}


@pytest.mark.parametrize(
    "cls,code,exit_code",
    [
        (ConfigurationError, "CONFIG_ERROR", 3),
        (CorruptStreamError, "CORRUPT_STREAM", 2),
        (ProtocolError, "PROTOCOL_ERROR", 3),
        (AccumulatorOverflowError, "OVERFLOW_ERROR", 2),
        (FormatError, "FORMAT_ERROR", 2),
        (VerificationMismatchError, "MISMATCH", 1),
    ],
)
def test_error_codes(cls, code, exit_code):
    """Each subclass carries its code and maps to its exit code."""
    error = cls("failed", {"o": 3})
    assert isinstance(error, BlmacSimError)
    assert error.code == code
    assert error.details == {"o": 3}
    assert exit_code_for(error) == exit_code


def test_io_errors_exit_2():
    assert exit_code_for(BlmacSimError("disk", "IO_ERROR")) == 2


def test_create_error_result():
    """Test the create_error_result function."""
    error = CorruptStreamError("payload exhausted", {"o": 7, "byte_offset": 120})
    result = create_error_result(error, command="run", exit_code=2, layer="conv4")

    assert result.status == "error"
    assert result.output == "payload exhausted"
    assert result.exit_code == 2
    assert result.error.message == "payload exhausted"
    assert result.error.code == "CORRUPT_STREAM"
    assert result.error.details["command"] == "run"
    assert result.error.details["exit_code"] == 2
    assert result.error.details["layer"] == "conv4"
    assert result.error.details["o"] == 7
    assert result.error.details["byte_offset"] == 120


def test_create_error_result_keeps_call_details_first():
    """Details passed to the call win over same-named details of the error."""
    error = FormatError("missing stream", {"layer": "from_error", "path": "x.blws"})
    result = create_error_result(error, layer="conv0")
    assert result.error.details == {"layer": "conv0", "path": "x.blws"}
    assert result.exit_code is None
