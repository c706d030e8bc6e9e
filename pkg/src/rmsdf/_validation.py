"""Input checks shared by the estimator wrappers and the CLI."""

from __future__ import annotations

import numpy as np


def check_image(image, name="image"):
    """Return ``image`` as float64 ``(H, W, C)``; a 2D array gains one channel."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must be (H, W) or (H, W, C), got shape {np.shape(image)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_mask(mask, shape, name="mask"):
    arr = np.asarray(mask)
    if arr.shape != tuple(shape):
        raise ValueError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    return arr.astype(bool)


def check_unit_vectors(vectors, name="normals", tol=1e-6):
    """Validate ``(..., 3)`` unit vectors; returns a float64 copy."""
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must have a trailing axis of length 3, got {arr.shape}")
    norm = np.linalg.norm(arr, axis=-1)
    if not np.all(np.abs(norm - 1.0) <= tol):
        raise ValueError(f"{name} must be unit length (max deviation {np.max(np.abs(norm - 1.0)):.3g})")
    return arr


def check_normal_map(normals, coverage, name="normals"):
    """Check a normal map against its coverage; only covered pixels must be unit."""
    arr = np.asarray(normals, dtype=np.float64)
    cov = np.asarray(coverage, dtype=bool)
    if arr.shape != cov.shape + (3,):
        raise ValueError(f"{name} has shape {arr.shape}, expected {cov.shape + (3,)}")
    check_unit_vectors(arr[cov], name)
    return arr


def check_direction(v, name="direction"):
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have 3 components")
    norm = np.linalg.norm(arr)
    if not norm > 0:
        raise ValueError(f"{name} must be nonzero")
    return arr / norm


def check_points(points, name="points"):
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must be (N, 3), got {np.shape(points)}")
    return arr


def check_positive_int(value, name):
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
