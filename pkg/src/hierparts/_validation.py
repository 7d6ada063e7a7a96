"""Input checks shared by the estimators and kernels."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array


def check_points(points, name="points", allow_empty=False) -> np.ndarray:
    if not allow_empty and len(np.asarray(points).reshape(-1, 3)) == 0:
        raise ValueError(f"{name} must contain at least one point")
    arr = np.asarray(points, dtype=float).reshape(-1, 3)
    if arr.size == 0:
        return arr
    return check_array(arr, dtype=float, input_name=name)


def check_embeddings(emb, name="embeddings", allow_empty=False) -> np.ndarray:
    arr = np.asarray(emb, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array (voxels x dims)")
    if arr.shape[0] == 0:
        if allow_empty:
            return arr
        raise ValueError(f"{name} is empty")
    # kernels call this in finite-difference loops; skip check_array's overhead
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or infinity")
    return arr


def check_labels(labels, n=None, name="labels") -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError(f"{name} must hold integer ids")
    arr = arr.astype(np.int64)
    if n is not None and len(arr) != n:
        raise ValueError(f"{name} has length {len(arr)}, expected {n}")
    return arr
