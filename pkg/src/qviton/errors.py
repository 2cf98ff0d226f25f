"""Shared exception types, mapped to CLI exit codes in cli.py."""


class QvitonError(Exception):
    """Base class for all package errors."""


class DimensionError(QvitonError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ConfigError(QvitonError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(QvitonError, RuntimeError):
    """A caller violated a documented precondition."""


class DatasetError(QvitonError, ValueError):
    """Dataset scanning or loading failed (empty root, bad layout)."""


class CheckpointError(QvitonError, ValueError):
    """Checkpoint file is malformed or does not match the config."""


class NumericalError(QvitonError, RuntimeError):
    """Training encountered a non-finite loss or gradient."""
