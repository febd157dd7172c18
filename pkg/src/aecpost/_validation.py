"""Input validation helpers shared by the estimators and free functions."""

from __future__ import annotations

import numbers

import numpy as np


def check_signal(x, name="signal", allow_empty=False):
    """Return ``x`` as a contiguous 1-D float64 array, rejecting NaN/inf."""
    arr = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_sample_rate(fs):
    if not isinstance(fs, numbers.Integral) or isinstance(fs, bool) or fs <= 0:
        raise ValueError(f"sample_rate must be a positive integer, got {fs!r}")
    return int(fs)


def check_same_rate(a, b):
    if a.sample_rate != b.sample_rate:
        raise ValueError(
            f"sample rate mismatch: {a.sample_rate} Hz vs {b.sample_rate} Hz "
            "(resampling is not supported)"
        )


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive and finite, got {value!r}")
    return value


def check_interval(value, name, low, high, closed=(True, True)):
    lo_ok = value >= low if closed[0] else value > low
    hi_ok = value <= high if closed[1] else value < high
    if not (np.isfinite(value) and lo_ok and hi_ok):
        left = "[" if closed[0] else "("
        right = "]" if closed[1] else ")"
        raise ValueError(f"{name} must lie in {left}{low}, {high}{right}, got {value!r}")
    return value


def check_same_length(*arrays, names=None):
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        label = ", ".join(names) if names else "inputs"
        raise ValueError(f"length mismatch between {label}: {[len(a) for a in arrays]}")
