"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numbers

import numpy as np

from ctbench.errors import DataError
from ctbench.gridio import DefectTable, Grid2D
from ctbench.projector import Sinogram


def check_image_batch(X) -> np.ndarray:
    """Return a finite float64 array of shape ``(n, N, N)``.

    Accepts one square image, a sequence of images or ``Grid2D`` values.
    """
    if isinstance(X, Grid2D):
        X = [X.values]
    elif isinstance(X, (list, tuple)):
        X = [np.asarray(x.values if isinstance(x, Grid2D) else x) for x in X]
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise DataError(f"expected an image or a stack of images, got shape {arr.shape}")
    if arr.shape[1] != arr.shape[2]:
        raise DataError(f"images must be square, got {arr.shape[1:]}")
    if not np.all(np.isfinite(arr)):
        raise DataError("images contain non-finite values")
    return arr


def check_sinogram_batch(X) -> np.ndarray:
    """Return a finite float64 array of shape ``(n, angles, bins)``."""
    if isinstance(X, Sinogram):
        X = [X.values]
    elif isinstance(X, (list, tuple)):
        X = [np.asarray(x.values if isinstance(x, Sinogram) else x) for x in X]
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or 0 in arr.shape:
        raise DataError(f"expected a sinogram or a stack of sinograms, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("sinograms contain non-finite values")
    return arr


def check_nonnegative(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value < 0:
        raise DataError(f"{name} must be a finite non-negative number, got {value!r}")
    return float(value)


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise DataError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_count_table(X) -> DefectTable:
    """Accept a ``DefectTable`` or an items x defects count array."""
    if isinstance(X, DefectTable):
        return X
    arr = np.asarray(X)
    if arr.ndim != 2:
        raise DataError("count table must be 2-D (items x defects)")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise DataError("counts must be integers")
        arr = arr.astype(np.int64)
    ids = [str(i + 1) for i in range(arr.shape[0])]
    names = [f"defect{j + 1}" for j in range(arr.shape[1])]
    return DefectTable(ids, names, arr)
