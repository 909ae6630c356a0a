"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .errors import RejectedInput


def check_image_batch(X, channels: int | None = None, value_range=(-1.0, 1.0),
                      name: str = "X") -> np.ndarray:
    """Coerce to (n, C, H, W) float64 and check finiteness and range."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    elif arr.ndim != 4:
        raise RejectedInput(f"{name}: expected 2-4 dims, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise RejectedInput(f"{name}: non-finite values")
    lo, hi = value_range
    if arr.min() < lo - 1e-9 or arr.max() > hi + 1e-9:
        raise RejectedInput(
            f"{name}: values outside [{lo}, {hi}] (got [{arr.min():.3g}, {arr.max():.3g}])")
    if channels is not None and arr.shape[1] != channels:
        raise RejectedInput(f"{name}: expected {channels} channels, got {arr.shape[1]}")
    return arr


def check_bits(bits, k: int | None = None, name: str = "bits") -> np.ndarray:
    arr = np.asarray(bits)
    arr = arr.reshape(-1) if arr.ndim == 1 else arr
    flat = arr.reshape(-1)
    if not np.all((flat == 0) | (flat == 1)):
        raise RejectedInput(f"{name}: entries must be 0/1")
    if k is not None and arr.shape[-1] != k:
        raise RejectedInput(f"{name}: expected length {k}, got {arr.shape[-1]}")
    return arr.astype(np.uint8)


def check_fitted(estimator, attr: str) -> None:
    from .errors import NotFittedError

    if getattr(estimator, attr, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} must be fitted before calling this method")
