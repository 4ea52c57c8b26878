"""
Custom exceptions for the hpa-moec package.

Every error carries the process exit code the command line reports for it.
"""
from typing import Any, Dict, Optional


class HpaMoecError(Exception):
    """Base exception for all hpa-moec related errors."""

    exit_code = 4


class ConfigError(HpaMoecError):
    """Raised when there's a configuration error."""

    exit_code = 2


class DataError(HpaMoecError):
    """Raised when input data is malformed or inconsistent."""

    exit_code = 3


class SchemaError(DataError):
    """Raised when a recording lacks a required column or meta key."""

    pass


class SelectionError(DataError):
    """Raised when a requested vehicle or recording cannot be selected."""

    pass


class CheckpointError(DataError):
    """Raised when a checkpoint is missing, corrupt or does not match the run."""

    pass


class NumericalError(HpaMoecError):
    """Raised when a gradient, loss or parameter vector stops being finite."""

    pass


class SimulationFault(HpaMoecError):
    """Raised when the simulator receives controls it cannot integrate."""

    def __init__(self, message: str, state: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.state = state or {}
