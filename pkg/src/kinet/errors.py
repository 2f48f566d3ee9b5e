"""Exception hierarchy. Each category carries the CLI exit code it maps to."""


class KinetError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(KinetError, ValueError):
    category = "config"
    exit_code = 2


class DataError(KinetError):
    category = "data"
    exit_code = 3


class ValidationError(DataError, ValueError):
    category = "validation"


class ShapeError(KinetError, ValueError):
    category = "shape"
    exit_code = 3


class NumericError(KinetError, ArithmeticError):
    category = "numeric"
    exit_code = 4


class StorageError(KinetError, OSError):
    category = "io"
    exit_code = 5


def check_shape(name, tensor, expected):
    """Raise ShapeError unless ``tensor.shape`` matches ``expected`` (None = any extent)."""
    actual = tuple(tensor.shape)
    if len(actual) != len(expected) or any(
        e is not None and e != a for e, a in zip(expected, actual)
    ):
        shown = tuple("*" if e is None else e for e in expected)
        raise ShapeError(f"{name}: expected shape {shown}, got {actual}")
