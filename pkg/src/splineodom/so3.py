"""Rotation utilities: quaternions, SO(3) exp/log maps and their Jacobians.

Conventions used throughout the package:
  - quaternions are stored as length-4 arrays [x, y, z, w] (scalar last),
    matching the TUM and trajectory text formats;
  - rotation matrices map body vectors into the world frame, v_W = R v_B;
  - tangent increments are applied on the right, R <- R @ exp(phi^).

All functions accept array-likes and return float64 numpy arrays.
"""

import numpy as np

_SMALL_ANGLE = 1e-8


def skew(v):
    """3-vector to skew-symmetric matrix, skew(v) @ u == cross(v, u)."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def quat_identity():
    return np.array([0.0, 0.0, 0.0, 1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-15:
        return quat_identity()
    q = q / n
    # canonical sign so q and -q serialize identically
    if q[3] < 0.0:
        q = -q
    return q


def quat_multiply(q1, q2):
    """Hamilton product, composition R(q1 * q2) = R(q1) @ R(q2)."""
    x1, y1, z1, w1 = q1
    x2, y2, z2, w2 = q2
    return np.array([
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
    ])


def quat_conjugate(q):
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_to_matrix(q):
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return quat_normalize(np.array([x, y, z, w]))


def quat_exp(phi):
    """Exponential map, rotation vector (rad) to unit quaternion."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    half = 0.5 * theta
    if theta < _SMALL_ANGLE:
        # sin(t/2)/t ~ 1/2 - t^2/48
        k = 0.5 - theta * theta / 48.0
    else:
        k = np.sin(half) / theta
    return quat_normalize(np.array([k * phi[0], k * phi[1], k * phi[2], np.cos(half)]))


def quat_log(q):
    """Logarithm map, unit quaternion to rotation vector (rad)."""
    q = np.asarray(q, dtype=float)
    if q[3] < 0.0:
        q = -q
    vn = np.linalg.norm(q[:3])
    theta = 2.0 * np.arctan2(vn, q[3])
    if vn < _SMALL_ANGLE:
        # theta/sin(theta/2) ~ 2 + theta^2/12
        return q[:3] * (2.0 + theta * theta / 12.0)
    return q[:3] * (theta / vn)


def so3_exp(phi):
    """Rotation vector to rotation matrix (Rodrigues)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    # (1-cos t)/t^2 via half-angle, stable for small t
    s = np.sin(0.5 * theta) / theta
    b = 2.0 * s * s
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R):
    """Rotation matrix to rotation vector (rad)."""
    return quat_log(matrix_to_quat(R))


def _jac_coeffs(theta):
    """Coefficients (a, b) with J_r = I - a*K + b*K^2 for K = skew(unit axis)*theta.

    Written against K = skew(phi) (not the unit axis): J_r = I - c1*K + c2*K^2
    with c1 = (1-cos)/t^2, c2 = (t-sin)/t^3. Both stable near zero.
    """
    if theta < 1e-4:
        t2 = theta * theta
        c1 = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c2 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        s = np.sin(0.5 * theta) / theta
        c1 = 2.0 * s * s
        c2 = (theta - np.sin(theta)) / theta ** 3
    return c1, c2


def right_jacobian(phi):
    """J_r(phi): Exp(phi + dphi) ~ Exp(phi) Exp(J_r dphi)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    c1, c2 = _jac_coeffs(theta)
    return np.eye(3) - c1 * K + c2 * (K @ K)


def left_jacobian(phi):
    """J_l(phi) = J_r(phi)^T."""
    return right_jacobian(phi).T


def _jac_inv_c2(theta):
    """K^2 coefficient of J_r^{-1} written against K = skew(phi)."""
    if theta < 1e-4:
        t2 = theta * theta
        return 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    half = 0.5 * theta
    return (1.0 - half * np.cos(half) / np.sin(half)) / (theta * theta)


def right_jacobian_inv(phi):
    """J_r^{-1}(phi): Log(Exp(phi) Exp(dphi)) ~ phi + J_r^{-1} dphi."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    return np.eye(3) + 0.5 * K + _jac_inv_c2(theta) * (K @ K)


def left_jacobian_inv(phi):
    """J_l^{-1}(phi) = J_r^{-1}(phi)^T: Log(Exp(dphi) Exp(phi)) ~ phi + J_l^{-1} dphi."""
    return right_jacobian_inv(phi).T


def rotation_distance(Ra, Rb):
    """Geodesic distance between two rotations in radians."""
    return np.linalg.norm(so3_log(np.asarray(Ra).T @ np.asarray(Rb)))


def random_rotation(rng):
    """Uniformly distributed random rotation matrix from a seeded Generator."""
    q = rng.normal(size=4)
    return quat_to_matrix(quat_normalize(q))
