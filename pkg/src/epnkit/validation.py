"""Input validation helpers shared across the package."""

import numpy as np


def as_float_array(x, name: str, shape: tuple | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_points(x, name: str = "points") -> np.ndarray:
    """Coerce to an (N, 3) float64 point array with N >= 1, all finite."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one point")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def as_rotation(r, name: str = "rotation", tol: float = 1e-9) -> np.ndarray:
    """Coerce to a (3, 3) float64 proper rotation matrix.

    Orthogonality and det(R) = 1 are checked to max-abs tolerance `tol`.
    """
    arr = as_float_array(r, name, shape=(3, 3))
    defect = np.max(np.abs(arr.T @ arr - np.eye(3)))
    if defect > tol:
        raise ValueError(f"{name} is not orthogonal (defect {defect:.3e} > {tol:.0e})")
    det = np.linalg.det(arr)
    if abs(det - 1.0) > tol:
        raise ValueError(f"{name} is not proper (det {det:.12f})")
    return arr


def as_rotation_stack(rs, name: str = "rotations", tol: float = 1e-9) -> np.ndarray:
    arr = np.asarray(rs, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1:] != (3, 3):
        raise ValueError(f"{name} must have shape (B, 3, 3), got {arr.shape}")
    for i in range(arr.shape[0]):
        as_rotation(arr[i], name=f"{name}[{i}]", tol=tol)
    return arr


def as_cloud_list(xs, name: str = "X") -> list[np.ndarray]:
    """Coerce a sequence of point clouds to a list of (N_i, 3) arrays."""
    if isinstance(xs, np.ndarray) and xs.ndim == 2:
        xs = [xs]
    clouds = [as_points(c, name=f"{name}[{i}]") for i, c in enumerate(xs)]
    if not clouds:
        raise ValueError(f"{name} must contain at least one point cloud")
    return clouds
