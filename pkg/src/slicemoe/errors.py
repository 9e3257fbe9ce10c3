"""Exception hierarchy. Each family maps to one CLI exit code."""

from __future__ import annotations


class SliceMoEError(Exception):
    exit_code = 1


class ConfigError(SliceMoEError, ValueError):
    """Invalid hyperparameter or configuration (e.g. d not divisible by S)."""

    exit_code = 2


class ParameterError(ConfigError):
    """Invalid scalar argument to an operation (temperature <= 0, rate outside [0, 1))."""


class DimensionError(SliceMoEError, ValueError):
    exit_code = 2


class ContractError(SliceMoEError, ValueError):
    """A documented precondition was violated by the caller."""

    exit_code = 2


class DataError(SliceMoEError, ValueError):
    exit_code = 3


class IntegrityError(DataError):
    """A persisted file is truncated, corrupt or inconsistent."""


class SchemaError(IntegrityError):
    """A persisted file declares a schema version this build does not understand."""


class NumericError(SliceMoEError, FloatingPointError):
    exit_code = 4


class EquivalenceError(SliceMoEError, AssertionError):
    """Grouped and naive dispatch disagreed; benchmarks refuse to run."""

    exit_code = 4
