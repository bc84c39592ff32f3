"""Input validation helpers used at every public API boundary.

All feature grids are float64 arrays of shape (height, width, channels),
C-contiguous so the memory layout is row-major and channel-interleaved.
Masks are uint8 arrays of shape (height, width) holding only 0 and 1.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, UsageError


def as_feature_grid(x, channels=None, name="features"):
    """Coerce ``x`` to a finite float64 (H, W, C) array.

    A 2-D input is promoted to a single channel. Raises ConfigurationError
    on wrong rank, wrong channel count, or non-finite values.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, np.newaxis]
    if arr.ndim != 3:
        raise ConfigurationError(f"{name} must be 2-D or 3-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ConfigurationError(f"{name} has an empty dimension: shape {arr.shape}")
    if channels is not None and arr.shape[2] != channels:
        raise ConfigurationError(
            f"{name} has {arr.shape[2]} channels, expected {channels}"
        )
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} contains non-finite values")
    return np.ascontiguousarray(arr)


def as_binary_mask(y, shape=None, name="mask"):
    """Coerce ``y`` to a uint8 (H, W) array of zeros and ones."""
    arr = np.asarray(y)
    if arr.ndim != 2:
        raise ConfigurationError(f"{name} must be 2-D, got shape {arr.shape}")
    vals = np.unique(arr)
    if not np.all(np.isin(vals, (0, 1))):
        raise ConfigurationError(f"{name} must contain only 0 and 1, got {vals[:8]}")
    if shape is not None and arr.shape != tuple(shape):
        raise UsageError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    return np.ascontiguousarray(arr.astype(np.uint8))


def check_same_shape(a, b, name_a="first", name_b="second"):
    if a.shape[:2] != b.shape[:2]:
        raise UsageError(
            f"{name_a} shape {a.shape[:2]} does not match {name_b} shape {b.shape[:2]}"
        )


def as_param_vector(theta, length=None, name="parameters"):
    """Coerce to a finite float64 1-D vector, optionally of fixed length."""
    arr = np.asarray(theta, dtype=np.float64).ravel()
    if length is not None and arr.size != length:
        raise ConfigurationError(f"{name} has length {arr.size}, expected {length}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} contains non-finite values")
    return arr


def check_kernel(weights, bias):
    """Validate a convolution kernel: odd square spatial extent, matching bias."""
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64).ravel()
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ConfigurationError(
            f"kernel weights must have shape (k, k, in, out), got {w.shape}"
        )
    if w.shape[0] % 2 != 1:
        raise ConfigurationError(f"kernel size must be odd, got {w.shape[0]}")
    if b.size != w.shape[3]:
        raise ConfigurationError(
            f"bias length {b.size} does not match out channels {w.shape[3]}"
        )
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
        raise ConfigurationError("kernel contains non-finite values")
    return w, b


def as_rng(seed):
    """Seeded PCG64 generator; passes an existing Generator through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
