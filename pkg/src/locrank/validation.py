"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np

from .data import LABEL_EQ, LABEL_GT
from .errors import DataError

__all__ = ["check_images", "check_pairs"]


def check_images(X, name: str = "X") -> np.ndarray:
    """Return ``X`` as a finite float64 ``[N, C, H, W]`` array with C in {1, 3}.

    A single image ``[C, H, W]`` or a grayscale stack ``[N, H, W]`` is not
    guessed at; pass the 4-D layout explicitly.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 4:
        raise DataError(f"{name} must be [n_images, channels, height, width], got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise DataError(f"{name} holds no images")
    if arr.shape[1] not in (1, 3):
        raise DataError(f"{name} must have 1 or 3 channels, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains NaN or infinite values")
    return arr


def check_pairs(X, y=None, name: str = "X") -> tuple[np.ndarray, np.ndarray | None]:
    """Validate pair stacks ``[n, 2, C, H, W]`` and labels.

    Labels may be 1 (first stronger), 0.5 (similar) or 0 (second stronger).
    Label-0 pairs are swapped so that the returned labels are all in
    {1, 0.5}.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 5 or arr.shape[1] != 2:
        raise DataError(f"{name} must be [n_pairs, 2, channels, height, width], got shape {arr.shape}")
    check_images(arr.reshape((-1,) + arr.shape[2:]), name)
    if y is None:
        return arr, None
    labels = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(labels) != len(arr):
        raise DataError(f"{name} has {len(arr)} pairs but y has {len(labels)} labels")
    bad = ~np.isin(labels, (0.0, LABEL_EQ, LABEL_GT))
    if bad.any():
        raise DataError(f"labels must be 0, 0.5 or 1; found {labels[bad][0]!r} at position {int(np.argmax(bad))}")
    swap = labels == 0.0
    if swap.any():
        arr = arr.copy()
        arr[swap] = arr[swap][:, ::-1]
        labels = np.where(swap, LABEL_GT, labels)
    return arr, labels
