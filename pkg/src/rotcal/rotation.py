"""Quaternion and rotation-matrix utilities.

Conventions
-----------
- Quaternions are unit-norm, stored as numpy arrays in ``[w, x, y, z]``
  (scalar-first) order.
- ``quat_to_matrix(q)`` returns the matrix R such that rotating a vector v is
  ``R @ v``; composing rotations satisfies R(a*b) = R(a) @ R(b) with Hamilton
  products.
- Tangent-space increments are 3-vectors (axis * angle, radians) applied on
  the right: ``q_new = q * exp(delta)``. This is the convention every
  analytic Jacobian in this package assumes.
- All angles are radians unless a function name says degrees.
"""

from __future__ import annotations

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize zero or non-finite quaternion")
    return q / n


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b in wxyz order."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by q. v may be (3,) or (n, 3)."""
    return np.asarray(v, dtype=float) @ quat_to_matrix(q).T


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's branching method)."""
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_exp(delta: np.ndarray) -> np.ndarray:
    """Exponential map from a 3-vector tangent increment to a unit quaternion."""
    delta = np.asarray(delta, dtype=float)
    theta = np.linalg.norm(delta)
    if theta < 1e-12:
        # second-order series keeps this smooth through zero
        q = np.array([1.0 - theta * theta / 8.0, 0.5 * delta[0], 0.5 * delta[1], 0.5 * delta[2]])
        return quat_normalize(q)
    axis = delta / theta
    half = 0.5 * theta
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_apply_tangent(q: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Right-multiplicative update q * exp(delta), renormalized."""
    return quat_normalize(quat_multiply(q, quat_exp(delta)))


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle of q in radians, in [0, pi]."""
    w = abs(q[0])
    v = np.linalg.norm(q[1:])
    return 2.0 * np.arctan2(v, w)


def geodesic_angle(qa: np.ndarray, qb: np.ndarray) -> float:
    """Angle of the relative rotation between two unit quaternions (radians)."""
    return quat_angle(quat_multiply(quat_conjugate(qa), qb))


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u). v may be (3,) or (n, 3)."""
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Closest rotation matrix to m in Frobenius norm.

    Orthogonal polar factor via SVD, with the determinant forced to +1 so the
    result lies on SO(3) even for reflective inputs.
    """
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        raise np.linalg.LinAlgError("degenerate matrix has no unique nearest rotation")
    return u @ np.diag([1.0, 1.0, d]) @ vt


def average_quats(quats: list[np.ndarray]) -> np.ndarray:
    """Mean of nearby unit quaternions (sign-aligned arithmetic mean).

    Adequate for clusters spread by a few degrees; not a general barycenter.
    """
    ref = quats[0]
    acc = np.zeros(4)
    for q in quats:
        acc += q if np.dot(q, ref) >= 0 else -q
    return quat_normalize(acc)


def random_quat(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation (Gaussian-4 method)."""
    q = rng.normal(size=4)
    return quat_normalize(q if q[0] >= 0 else -q)


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("zero axis")
    return quat_exp(axis / n * angle_rad)
