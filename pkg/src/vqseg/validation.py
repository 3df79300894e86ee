"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError


def check_image_batch(X, in_channels: int | None = None) -> np.ndarray:
    """Coerce to (N, C, H, W) float64; accepts (N, H, W) as single-channel."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise DimensionError(f"expected (N, H, W) or (N, C, H, W) images, got {X.shape}")
    if in_channels is not None and X.shape[1] != in_channels:
        raise DimensionError(f"expected {in_channels} channels, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise DomainError("images contain non-finite values")
    return X


def check_mask_batch(y, image_shape: tuple, num_classes: int | None = None) -> np.ndarray:
    """Coerce to (N, H, W) int64 labels aligned with the image batch."""
    y = np.asarray(y)
    if y.ndim != 3:
        raise DimensionError(f"expected (N, H, W) masks, got {y.shape}")
    n, _, h, w = image_shape
    if y.shape != (n, h, w):
        raise DimensionError(f"masks {y.shape} do not align with images {image_shape}")
    labels = y.astype(np.int64)
    if (labels != y).any():
        raise DomainError("mask labels must be integers")
    if labels.min() < 0:
        raise DomainError("mask labels must be non-negative")
    if num_classes is not None and labels.max() >= num_classes:
        raise DomainError(
            f"mask label {labels.max()} outside [0, {num_classes})"
        )
    return labels
