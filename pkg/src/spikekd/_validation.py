"""Small input-validation helpers shared by the public functions."""
import numpy as np


def as_vector(x, size, name="vector"):
    arr = np.asarray(x, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise ValueError(f"{name} must have {size} components, got shape {np.shape(x)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def as_points(x, name="points", dim=3):
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1 and arr.size == dim:
        arr = arr.reshape(1, dim)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"{name} must have shape (n, {dim}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must contain only finite values")
    return arr


def check_rotation(R, tol=1e-9, name="rotation"):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3")
    if not np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0.0):
        raise ValueError(f"{name} is not orthonormal")
    if np.linalg.det(R) <= 0:
        raise ValueError(f"{name} must have determinant +1")
    return R


def check_positive(value, name):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value
