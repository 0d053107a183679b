"""Rotation algebra on SO(3).

Quaternions are numpy arrays ``(w, x, y, z)`` with the scalar first and act
as active rotations from the sensor frame into the navigation frame.
Modified Rodrigues Parameters (MRPs) are 3-vectors ``e * tan(angle / 4)``.

All functions are pure and work on plain numpy arrays.
"""

from __future__ import annotations

import numpy as np

_SMALL = 1e-12

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip the sign of ``q`` so that its scalar part is non-negative."""
    q = np.asarray(q, dtype=float)
    return -q if q[0] < 0.0 else q


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    q = np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )
    return q / np.sqrt(q @ q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_to_matrix_batch(q: np.ndarray) -> np.ndarray:
    """Vectorized :func:`quat_to_matrix` for an ``(n, 4)`` array."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the canonical (w >= 0) quaternion."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return quat_canonical(quat_normalize(q))


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate(([np.cos(angle / 2.0)], np.sin(angle / 2.0) * axis))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return quat_to_matrix(q) @ v


def quat_exp(v: np.ndarray) -> np.ndarray:
    """Quaternion exponential of the half-angle vector ``v``.

    The result rotates by ``2 * |v|`` about ``v / |v|``.
    """
    v = np.asarray(v, dtype=float)
    n2 = v @ v
    if n2 < _SMALL * _SMALL:
        # second-order series of (cos|v|, sin|v|/|v| * v)
        return quat_normalize(np.concatenate(([1.0 - 0.5 * n2], v * (1.0 - n2 / 6.0))))
    n = np.sqrt(n2)
    return np.concatenate(([np.cos(n)], np.sin(n) / n * v))


def quat_log(q: np.ndarray) -> np.ndarray:
    """Half-angle vector of ``q`` on the principal branch (angle <= pi)."""
    q = quat_canonical(q)
    v = q[1:]
    s = np.sqrt(v @ v)
    if s < _SMALL:
        return v / q[0]
    return np.arctan2(s, q[0]) / s * v


def rotvec_to_quat(phi: np.ndarray) -> np.ndarray:
    """Quaternion for the rotation vector ``phi`` (angle ``|phi|``)."""
    return quat_exp(0.5 * np.asarray(phi, dtype=float))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    return 2.0 * quat_log(q)


def quat_from_mrp(chi: np.ndarray) -> np.ndarray:
    chi = np.asarray(chi, dtype=float)
    n2 = chi @ chi
    d = 1.0 + n2
    return np.concatenate(([(1.0 - n2) / d], 2.0 * chi / d))


def mrp_from_quat(q: np.ndarray) -> np.ndarray:
    q = quat_canonical(q)
    return q[1:] / (1.0 + q[0])


def mrp_shadow(chi: np.ndarray) -> np.ndarray:
    """Return ``chi`` or its shadow set so that the norm stays at most one."""
    chi = np.asarray(chi, dtype=float)
    n2 = chi @ chi
    if n2 > 1.0:
        return -chi / n2
    return chi


def mrp_to_matrix(chi: np.ndarray) -> np.ndarray:
    return quat_to_matrix(quat_from_mrp(chi))


def mrp_from_matrix(R: np.ndarray) -> np.ndarray:
    return mrp_from_quat(quat_from_matrix(R))


def mrp_compose(chi: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """MRP of ``q(chi) * q(delta)``, shadow-switched."""
    return mrp_shadow(mrp_from_quat(quat_multiply(quat_from_mrp(chi), quat_from_mrp(delta))))


def cross_matrix(a: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -a[2], a[1]],
            [a[2], 0.0, -a[0]],
            [-a[1], a[0], 0.0],
        ]
    )


def rotation_angle(R: np.ndarray) -> float:
    """Angle of the rotation ``R`` in ``[0, pi]``."""
    c = 0.5 * (np.trace(R) - 1.0)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    # atan2 stays accurate near 0 and pi where arccos of the trace does not
    return float(np.arctan2(s, np.clip(c, -1.0, 1.0)))


def rotation_angle_batch(R: np.ndarray) -> np.ndarray:
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    skew = np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        axis=-1,
    )
    s = 0.5 * np.linalg.norm(skew, axis=-1)
    return np.arctan2(s, np.clip(c, -1.0, 1.0))


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of the exponential map at rotation vector ``phi``."""
    theta2 = phi @ phi
    K = cross_matrix(phi)
    if theta2 < 1e-10:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    theta = np.sqrt(theta2)
    return (
        np.eye(3)
        - (1.0 - np.cos(theta)) / theta2 * K
        + (theta - np.sin(theta)) / (theta2 * theta) * K @ K
    )


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse of the left Jacobian of the exponential map at ``phi``."""
    theta2 = phi @ phi
    K = cross_matrix(phi)
    if theta2 < 1e-10:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    theta = np.sqrt(theta2)
    coef = 1.0 / theta2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * K + coef * K @ K


def quat_multiply_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product over the last axis of broadcastable ``(..., 4)`` arrays."""
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate_batch(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_log_batch(q: np.ndarray) -> np.ndarray:
    q = np.where(q[..., :1] < 0, -q, q)
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(s < _SMALL, 1.0, s)
    scale = np.where(s < _SMALL, 1.0 / q[..., :1], np.arctan2(s, q[..., :1]) / safe)
    return scale * v


def quat_exp_batch(v: np.ndarray) -> np.ndarray:
    """:func:`quat_exp` over the last axis of ``(..., 3)`` half-angle vectors."""
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    small = n < _SMALL
    sinc = np.where(small, 1.0 - n * n / 6.0, np.sin(n) / np.where(small, 1.0, n))
    q = np.concatenate((np.cos(n), sinc * v), axis=-1)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_from_matrix_batch(R: np.ndarray) -> np.ndarray:
    """:func:`quat_from_matrix` over a ``(..., 3, 3)`` stack."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.array([quat_from_matrix(Rk) for Rk in flat])
    return out.reshape(R.shape[:-2] + (4,))
