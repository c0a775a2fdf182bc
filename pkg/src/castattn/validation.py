"""Input validation helpers for the estimator wrappers."""

from __future__ import annotations

import numpy as np

from .kernel.tensor import FLOAT_DTYPES


def resolve_dtype(dtype) -> np.dtype:
    aliases = {"f32": np.float32, "f64": np.float64, "float32": np.float32, "float64": np.float64}
    dt = np.dtype(aliases.get(dtype, dtype))
    if dt not in FLOAT_DTYPES:
        raise ValueError(f"dtype must be float32 or float64, got {dtype!r}")
    return dt


def check_sequences(X, dtype=np.float32, d=None, allow_single: bool = True) -> np.ndarray:
    """Validate sequence input shaped ``(n_sequences, N, d)`` or ``(N, d)``.

    Returns a C-contiguous float array of ``dtype``.
    """
    arr = np.asarray(X)
    if arr.dtype == object or not np.issubdtype(arr.dtype, np.number):
        raise ValueError(f"expected numeric sequences, got dtype {arr.dtype}")
    if arr.ndim == 2 and not allow_single:
        raise ValueError("expected a batch of sequences with shape (n_sequences, N, d)")
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected shape (N, d) or (n_sequences, N, d), got {arr.shape}")
    if 0 in arr.shape:
        raise ValueError(f"empty input with shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("input contains NaN or infinity")
    if d is not None and arr.shape[-1] != d:
        raise ValueError(f"X has {arr.shape[-1]} features, but the estimator was fitted with {d}")
    return np.ascontiguousarray(arr, dtype=resolve_dtype(dtype))


def check_binary_labels(y, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Encode labels of a two-class problem as 0/1; returns ``(classes, encoded)``."""
    y = np.asarray(y).reshape(-1)
    if y.shape[0] != n_samples:
        raise ValueError(f"got {y.shape[0]} labels for {n_samples} sequences")
    classes, encoded = np.unique(y, return_inverse=True)
    if len(classes) != 2:
        raise ValueError(f"expected exactly two classes, got {len(classes)}")
    return classes, encoded
