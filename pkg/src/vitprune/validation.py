"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np


def as_image_batch(X, image_size: int, channels: int = 3) -> np.ndarray:
    """Coerce X to a float32 (n, C, S, S) batch.

    Accepts either the 4D image layout or flattened 2D rows of length
    C*S*S (the sklearn-conventional sample matrix).
    """
    X = np.asarray(X)
    n_pixels = channels * image_size * image_size
    if X.ndim == 2:
        if X.shape[1] != n_pixels:
            raise ValueError(
                f"expected {n_pixels} features per flattened sample "
                f"({channels}x{image_size}x{image_size}), got {X.shape[1]}")
        X = X.reshape(X.shape[0], channels, image_size, image_size)
    elif X.ndim == 4:
        if X.shape[1:] != (channels, image_size, image_size):
            raise ValueError(
                f"expected images of shape ({channels}, {image_size}, "
                f"{image_size}), got {X.shape[1:]}")
    else:
        raise ValueError(f"X must be 2D or 4D, got ndim={X.ndim}")
    if X.shape[0] == 0:
        raise ValueError("X contains no samples")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    return X


def encode_labels(y) -> tuple[np.ndarray, np.ndarray]:
    """Return (classes, integer-encoded labels)."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1D, got shape {y.shape}")
    classes, encoded = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    return classes, encoded.astype(np.int64)
