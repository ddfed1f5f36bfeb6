"""Input validation helpers shared across the package."""

import numpy as np


class InvalidArgumentError(ValueError):
    """Raised when an input violates an operation's preconditions."""


class NumericFailure(ArithmeticError):
    """A computation produced non-finite values."""


class MissingPrerequisiteError(RuntimeError):
    """Raised when a pipeline stage is invoked before its inputs exist."""


def check_finite(x, name="array"):
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return x


def check_shape(x, shape, name="array"):
    """Check ``x`` against ``shape``; ``None`` entries match any size."""
    x = np.asarray(x)
    if x.ndim != len(shape) or any(s is not None and s != d for s, d in zip(shape, x.shape)):
        raise InvalidArgumentError(f"{name} has shape {x.shape}, expected {tuple(shape)}")
    return x


def check_image(img, name="image", channels=3):
    img = np.asarray(img, dtype=np.float64)
    if channels is None:
        check_shape(img, (None, None), name)
    else:
        check_shape(img, (None, None, channels), name)
    check_finite(img, name)
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise InvalidArgumentError(f"{name} values must lie in [0, 1]")
    return img


def check_rotation(R, tol=1e-6, name="R"):
    R = check_shape(np.asarray(R, dtype=np.float64), (3, 3), name)
    check_finite(R, name)
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidArgumentError(f"{name} is not a proper rotation (tol {tol})")
    return R
