import numpy as np
import pytest

from splineodom import so3


def test_quat_matrix_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(200):
        q = so3.quat_normalize(rng.normal(size=4))
        R = so3.quat_to_matrix(q)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
        q2 = so3.matrix_to_quat(R)
        assert np.allclose(q, q2, atol=1e-12)


def test_exp_log_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(200):
        # keep |phi| < pi so the log is the unique inverse
        phi = rng.normal(size=3)
        phi *= rng.uniform(0.0, 3.1) / np.linalg.norm(phi)
        R = so3.so3_exp(phi)
        assert np.allclose(so3.so3_log(R), phi, atol=1e-10)
        q = so3.quat_exp(phi)
        assert np.allclose(so3.quat_to_matrix(q), R, atol=1e-12)
        assert np.allclose(so3.quat_log(q), phi, atol=1e-10)


def test_exp_small_angle():
    for scale in (1e-6, 1e-9, 1e-12, 0.0):
        phi = np.array([1.0, -2.0, 0.5]) * scale
        R = so3.so3_exp(phi)
        assert np.allclose(so3.so3_log(R), phi, atol=1e-15 + 1e-6 * scale)
        assert np.allclose(so3.quat_log(so3.quat_exp(phi)), phi, atol=1e-15 + 1e-6 * scale)


def test_quat_multiply_matches_matrix_product():
    rng = np.random.default_rng(2)
    for _ in range(100):
        q1 = so3.quat_normalize(rng.normal(size=4))
        q2 = so3.quat_normalize(rng.normal(size=4))
        R12 = so3.quat_to_matrix(so3.quat_multiply(q1, q2))
        assert np.allclose(R12, so3.quat_to_matrix(q1) @ so3.quat_to_matrix(q2), atol=1e-12)


def test_right_jacobian_first_order():
    rng = np.random.default_rng(3)
    for _ in range(100):
        phi = rng.uniform(-2.0, 2.0, size=3)
        dphi = rng.normal(size=3) * 1e-6
        lhs = so3.so3_exp(phi + dphi)
        rhs = so3.so3_exp(phi) @ so3.so3_exp(so3.right_jacobian(phi) @ dphi)
        assert so3.rotation_distance(lhs, rhs) < 1e-11


def test_right_jacobian_inverse_consistency():
    rng = np.random.default_rng(4)
    for _ in range(100):
        phi = rng.uniform(-2.0, 2.0, size=3)
        J = so3.right_jacobian(phi) @ so3.right_jacobian_inv(phi)
        assert np.allclose(J, np.eye(3), atol=1e-10)


def test_left_jacobian_inv_first_order():
    rng = np.random.default_rng(5)
    for _ in range(100):
        phi = rng.uniform(-2.0, 2.0, size=3)
        dphi = rng.normal(size=3) * 1e-6
        lhs = so3.so3_log(so3.so3_exp(dphi) @ so3.so3_exp(phi))
        rhs = phi + so3.left_jacobian_inv(phi) @ dphi
        assert np.allclose(lhs, rhs, atol=1e-10)


def test_skew_cross():
    a = np.array([1.0, 2.0, 3.0])
    b = np.array([-0.5, 0.1, 2.0])
    assert np.allclose(so3.skew(a) @ b, np.cross(a, b))
