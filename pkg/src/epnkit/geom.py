"""Rotation geometry: matrices, unit quaternions, angular metrics.

Conventions:
- Rotation matrices are 3x3 float64 acting on column vectors: v' = R @ v.
- Quaternions are length-4 float64 arrays [w, x, y, z], scalar first,
  canonicalized to w >= 0 (q and -q describe the same rotation).
- Angular metrics return degrees.
"""

import numpy as np

from .validation import as_float_array, as_rotation

# Slack allowed on the arccos argument before the input is rejected as
# not-a-rotation; inside the slack the argument is clamped into [-1, 1].
TRACE_CLAMP_TOL = 1e-9


def rotation_from_quaternion(q) -> np.ndarray:
    """Convert a quaternion [w, x, y, z] to a 3x3 rotation matrix.

    The input is normalized defensively; q and -q map to the same matrix.
    """
    q = as_float_array(q, "quaternion", shape=(4,))
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("quaternion has near-zero norm")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quaternion_from_rotation(r) -> np.ndarray:
    """Convert a rotation matrix to a unit quaternion [w, x, y, z], w >= 0.

    Uses Shepperd's method: branch on the largest of trace and diagonal
    entries for numerical stability near 180 degree rotations.
    """
    r = as_rotation(r)
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        )
    elif r[1, 1] >= r[2, 2]:
        s = np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2]) * 2.0
        q = np.array(
            [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2]) * 2.0
        q = np.array(
            [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        )
    return canonicalize_quaternion(q / np.linalg.norm(q))


def canonicalize_quaternion(q) -> np.ndarray:
    """Fix the sign ambiguity: flip q so that w >= 0 (first nonzero positive if w == 0)."""
    q = np.asarray(q, dtype=np.float64)
    for c in q:
        if c > 0:
            return q.copy()
        if c < 0:
            return -q
    raise ValueError("zero quaternion cannot be canonicalized")


def normalize_quaternion(q) -> np.ndarray:
    q = as_float_array(q, "quaternion", shape=(4,))
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("quaternion has near-zero norm")
    return canonicalize_quaternion(q / n)


def rotation_about_axis(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues' formula: rotation by `angle_deg` degrees about `axis`."""
    axis = as_float_array(axis, "axis", shape=(3,))
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("axis must be nonzero")
    u = axis / n
    theta = np.radians(angle_deg)
    k = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


def angular_distance(r1, r2) -> float:
    """Geodesic angle between two rotations, in degrees, clamped to [0, 180].

    Computed as arccos((trace(R1^T R2) - 1) / 2). The cosine argument is
    clamped into [-1, 1] when within TRACE_CLAMP_TOL of the interval; a
    larger excursion means the inputs are not rotations and raises.
    """
    r1 = as_rotation(r1, "r1")
    r2 = as_rotation(r2, "r2")
    c = (np.trace(r1.T @ r2) - 1.0) / 2.0
    if c > 1.0 + TRACE_CLAMP_TOL or c < -1.0 - TRACE_CLAMP_TOL:
        raise ValueError(f"trace argument {c} outside [-1, 1] beyond tolerance")
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def angles_to(rotations: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Angles in degrees from each rotation in a (M, 3, 3) stack to `r`.

    Vectorized companion of `angular_distance`; uses
    trace(R_m^T r) = sum_ij R_m[i, j] * r[i, j].
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    c = (np.einsum("mij,ij->m", rotations, np.asarray(r, dtype=np.float64)) - 1.0) / 2.0
    if np.any(c > 1.0 + TRACE_CLAMP_TOL) or np.any(c < -1.0 - TRACE_CLAMP_TOL):
        raise ValueError("trace argument outside [-1, 1] beyond tolerance")
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_angle_deg(r) -> float:
    """Magnitude of a rotation in degrees (its angle to the identity)."""
    return angular_distance(r, np.eye(3))


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniform random unit quaternion (isotropic Gaussian, normalized)."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-6:
        q = rng.standard_normal(4)
    return canonicalize_quaternion(q / np.linalg.norm(q))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix."""
    return rotation_from_quaternion(random_quaternion(rng))
