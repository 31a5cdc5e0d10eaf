"""Input checks shared by the public functions and estimators."""
from __future__ import annotations

import numbers

import numpy as np


def check_points(values, name: str = "points", min_points: int = 0) -> np.ndarray:
    """Return ``values`` as a finite float array of shape ``(n, 2)``."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name} must have shape (n, 2), got {arr.shape}")
    if len(arr) < min_points:
        raise ValueError(f"{name} needs at least {min_points} rows, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite entries")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, names: tuple[str, str]) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{names[0]} {a.shape} and {names[1]} {b.shape} differ in shape")


def check_scalar(value, name: str, low=None, high=None, low_inclusive: bool = True) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number, got {value!r}")
    value = float(value)
    if low is not None and (value < low or (value == low and not low_inclusive)):
        raise ValueError(f"{name}={value} is below its lower bound {low}")
    if high is not None and value > high:
        raise ValueError(f"{name}={value} exceeds its upper bound {high}")
    return value


def check_triple(values, name: str, positive: bool = False) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be three finite numbers, got {values!r}")
    if positive and np.any(arr <= 0):
        raise ValueError(f"{name} must be componentwise positive, got {arr.tolist()}")
    return arr
