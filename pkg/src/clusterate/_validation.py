"""Argument checks shared across modules."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .exceptions import InputError

__all__ = [
    "check_array",
    "check_consistent_length",
    "check_proportions",
    "check_seed",
    "check_positive_int",
]


def check_proportions(p, h: int) -> np.ndarray:
    """Broadcast ``p`` to one treated proportion per block, each in (0, 1)."""
    arr = np.asarray(p, dtype=float)
    if arr.ndim == 0:
        arr = np.full(h, float(arr))
    arr = arr.ravel()
    if arr.shape[0] != h:
        raise InputError(f"expected {h} block proportions, got {arr.shape[0]}")
    bad = np.flatnonzero(~((arr > 0) & (arr < 1)))
    if bad.size:
        raise InputError(f"treated proportion for block {bad[0]} must lie in (0, 1), got {arr[bad[0]]}")
    return arr


def check_seed(seed) -> int:
    """Seeds are non-negative integers below 2**64."""
    if isinstance(seed, bool) or not isinstance(seed, numbers.Integral):
        raise InputError(f"seed must be an integer, got {seed!r}")
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise InputError("seed must lie in [0, 2**64)")
    return seed


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise InputError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
