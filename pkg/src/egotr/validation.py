"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .exceptions import UsageError


def check_images(X, size: tuple[int, int], view: str = "image", channels: int = 3) -> np.ndarray:
    """Validate a stack of images shaped (n, C, H, W) and return it as float32.

    A single (C, H, W) image is promoted to a batch of one.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=[np.float32, np.float64],
                    ensure_all_finite=True, input_name=view)
    if X.ndim == 3:
        X = X[None]
    expected = (channels, *size)
    if X.ndim != 4 or X.shape[1:] != expected:
        raise UsageError(f"{view} images must be shaped (n, {expected[0]}, {expected[1]}, "
                         f"{expected[2]}), got {X.shape}")
    return np.ascontiguousarray(X, dtype=np.float32)


def check_pairs(X, y):
    """Ground and aerial stacks of equal length with at least two pairs."""
    if y is None:
        raise UsageError("fit needs aerial images y paired with the ground images X")
    X, y = np.asarray(X), np.asarray(y)
    check_consistent_length(X, y)
    if len(X) < 2:
        raise UsageError("need >= 2 pairs so every batch has negatives")
    return X, y
