"""Error handling for blmac-sim.

This module provides standardized error handling for the processor model,
including exception classes and helper functions for creating structured error results.
"""

from typing import Any

from blmac_sim.models import CommandResult, ErrorDetails


class BlmacSimError(Exception):
    """Base class for all blmac-sim exceptions."""

    def __init__(self, message: str, code: str = "INTERNAL_ERROR", details: dict[str, Any] | None = None):
        """Initialize BlmacSimError.

        Args:
            message: Error message
            code: Error code
            details: Additional error details
        """
        super().__init__(message)
        self.message = message
        self.code = code
        self.details = details or {}


class ConfigurationError(BlmacSimError):
    """Exception raised when dimensions, parameters or a network config are inconsistent."""

    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(message, "CONFIG_ERROR", details)


class CorruptStreamError(BlmacSimError):
    """Exception raised when a compressed weight stream cannot be decoded."""

    def __init__(self, message: str, details: dict[str, Any] | None = None):
        """Initialize CorruptStreamError.

        Args:
            message: Error message
            details: Additional error details, usually ``o`` and ``byte_offset``
        """
        super().__init__(message, "CORRUPT_STREAM", details)


class ProtocolError(BlmacSimError):
    """Exception raised when the slice buffer is driven out of order."""

    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(message, "PROTOCOL_ERROR", details)


class AccumulatorOverflowError(BlmacSimError):
    """Exception raised in exact-check mode when a result does not fit the accumulators."""

    def __init__(self, message: str, details: dict[str, Any] | None = None):
        """Initialize AccumulatorOverflowError.

        Args:
            message: Error message
            details: Additional error details (``x``, ``y``, ``o`` of the first overflow)
        """
        super().__init__(message, "OVERFLOW_ERROR", details)


class FormatError(BlmacSimError):
    """Exception raised when a feature-map or stream file is malformed."""

    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(message, "FORMAT_ERROR", details)


class VerificationMismatchError(BlmacSimError):
    """Exception raised when the oracle and the processing elements disagree."""

    def __init__(self, message: str, details: dict[str, Any] | None = None):
        super().__init__(message, "MISMATCH", details)


EXIT_CODES = {
    "MISMATCH": 1,
    "CORRUPT_STREAM": 2,
    "FORMAT_ERROR": 2,
    "IO_ERROR": 2,
    "CONFIG_ERROR": 3,
    "PROTOCOL_ERROR": 3,
}


def exit_code_for(error: BlmacSimError) -> int:
    """Map an error to the command-line exit code."""
    return EXIT_CODES.get(error.code, 2)


def create_error_result(error: BlmacSimError, command: str | None = None, exit_code: int | None = None, layer: str | None = None) -> CommandResult:
    """Create a CommandResult with error details from a BlmacSimError.

    Args:
        error: The exception that occurred
        command: The command that caused the error
        exit_code: The exit code reported for the command
        layer: Name of the layer being processed when the error occurred

    Returns:
        CommandResult with error details
    """
    nested_details: dict[str, Any] = {}
    if command:
        nested_details["command"] = command
    if exit_code is not None:
        nested_details["exit_code"] = exit_code
    if layer is not None:
        nested_details["layer"] = layer

    # Add any custom details from the exception
    for key, value in error.details.items():
        if key not in nested_details:
            nested_details[key] = value

    error_details = ErrorDetails(message=str(error), code=error.code, details=nested_details)
    return CommandResult(status="error", output=str(error), error=error_details, exit_code=exit_code)
