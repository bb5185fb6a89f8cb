"""Input validation helpers and the exception types raised across the package."""

import numpy as np


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class ManifestParseError(ValidationError):
    """Malformed manifest line; ``lineno`` is 1-based."""

    def __init__(self, path, lineno, reason):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {reason}")


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values (e.g. a NaN loss)."""


def check_in_range(value, lo, hi, name):
    value = float(value)
    if not (lo <= value <= hi):
        raise ValidationError(f"{name}={value} outside [{lo}, {hi}]")
    return value


def check_probabilities(p, name="probability"):
    """Return ``p`` as a float64 array, raising if any entry leaves [0, 1]."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return arr


def check_binary_labels(y, name="labels"):
    arr = np.asarray(y)
    if arr.size and not np.all(np.isin(arr, (0, 1))):
        raise ValidationError(f"{name} must be 0/1")
    return arr.astype(np.int64)


def check_shape(arr, shape, name):
    """Check ``arr.shape`` against ``shape``; ``None`` entries match any size."""
    actual = tuple(arr.shape)
    if len(actual) != len(shape) or any(s is not None and s != a for s, a in zip(shape, actual)):
        raise ValidationError(f"{name} has shape {actual}, expected {tuple(shape)}")
    return arr


def check_finite(arr, name):
    if not np.all(np.isfinite(np.asarray(arr))):
        raise ValidationError(f"{name} contains non-finite values")
    return arr
