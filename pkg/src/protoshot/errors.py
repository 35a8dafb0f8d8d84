"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError and ShapeError -> 3.
"""


class ProtoshotError(Exception):
    """Base class for all package errors."""


class ConfigError(ProtoshotError):
    """Invalid configuration or command usage."""


class DataError(ProtoshotError):
    """Malformed or insufficient input data."""


class ShapeError(ProtoshotError):
    """Tensor shape contract violated."""


class NumericalError(ProtoshotError):
    """Non-finite values or other numerical failure."""
