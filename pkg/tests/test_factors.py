import numpy as np
import pytest

from splineodom import so3
from splineodom.factors import (
    BiasFactor,
    ExtrinsicSet,
    ImuFactor,
    LidarPlanarFactor,
    ReprojectionFactor,
    bias_residual,
    cauchy_weight,
    imu_residual,
    lidar_residual,
    reprojection_residual,
)
from splineodom.spline import KnotVector, Trajectory

from _helpers import random_trajectory

GRAVITY = np.array([0.0, 0.0, -9.8])


def constant_trajectory(q=None, p=None, n_segments=5, dt=0.1):
    q = so3.quat_identity() if q is None else q
    p = np.zeros(3) if p is None else np.asarray(p, float)
    knots = dt * np.arange(n_segments + 4)
    n_cp = knots.size - 1
    return Trajectory(KnotVector(knots), np.tile(q, (n_cp, 1)), np.tile(p, (n_cp, 1)))


def random_extrinsics(rng):
    T1, T2 = np.eye(4), np.eye(4)
    T1[:3, :3] = so3.random_rotation(rng)
    T1[:3, 3] = rng.normal(scale=0.2, size=3)
    T2[:3, :3] = so3.random_rotation(rng)
    T2[:3, 3] = rng.normal(scale=0.2, size=3)
    return ExtrinsicSet(T1, T2)


def perturbed(traj, kind, cp, delta):
    rot = traj.rotation_cps.copy()
    pos = traj.position_cps.copy()
    if kind == "rot":
        rot[cp] = so3.quat_multiply(rot[cp], so3.quat_exp(delta))
    else:
        pos[cp] = pos[cp] + delta
    out = Trajectory(traj.knot_vector, rot, pos, validate=False)
    out._seg_cache = traj._seg_cache
    return out


def check_cp_jacobians(traj, t, residual_fn, jac, dim, h=1e-6, rtol=1e-5):
    """Compare analytic CP jacobians against central finite differences."""
    i = traj.knot_vector.segment_of(t)
    for kind in ("rot", "pos"):
        for s in range(4):
            cp = i - 3 + s
            J_fd = np.zeros((dim, 3))
            for ax in range(3):
                d = np.zeros(3)
                d[ax] = h
                rp = residual_fn(perturbed(traj, kind, cp, d))
                rm = residual_fn(perturbed(traj, kind, cp, -d))
                J_fd[:, ax] = (np.atleast_1d(rp) - np.atleast_1d(rm)) / (2.0 * h)
            J_an = np.atleast_2d(jac[(kind, cp)])
            scale = max(1.0, np.abs(J_fd).max())
            assert np.allclose(J_an, J_fd, atol=rtol * scale), (kind, s)


class TestLidarFactor:
    def test_point_on_plane(self):
        traj = constant_trajectory()
        f = LidarPlanarFactor(np.array([0.0, 0.0, 2.0]), 0.45,
                              np.array([0.0, 0.0, 1.0]), -2.0)
        r, _ = lidar_residual(f, traj, ExtrinsicSet())
        assert r == pytest.approx(0.0, abs=1e-12)

    def test_signed_distance(self):
        traj = constant_trajectory()
        f = LidarPlanarFactor(np.array([0.0, 0.0, 3.0]), 0.45,
                              np.array([0.0, 0.0, 1.0]), -2.0)
        r, _ = lidar_residual(f, traj, ExtrinsicSet())
        assert r == pytest.approx(1.0, abs=1e-12)

    def test_jacobians_fd(self):
        rng = np.random.default_rng(50)
        for _ in range(20):
            traj = random_trajectory(rng)
            ext = random_extrinsics(rng)
            t = rng.uniform(traj.t_min + 1e-3, traj.t_max - 1e-3)
            n = rng.normal(size=3)
            n /= np.linalg.norm(n)
            f = LidarPlanarFactor(rng.normal(size=3), t, n, rng.normal())
            _, jac = lidar_residual(f, traj, ext)
            check_cp_jacobians(
                traj, t, lambda tr: lidar_residual(f, tr, ext)[0], jac, 1)

    def test_rigid_invariance(self):
        rng = np.random.default_rng(51)
        base = random_trajectory(rng)
        t = 0.5 * (base.t_min + base.t_max)
        n = np.array([0.0, 1.0, 0.0])
        ext = random_extrinsics(rng)
        f = LidarPlanarFactor(np.array([0.3, -0.2, 0.5]), t, n, 0.7)
        r0, _ = lidar_residual(f, base, ext)
        for _ in range(100):
            Rg = so3.random_rotation(rng)
            tg = rng.normal(size=3)
            rot = np.array([so3.matrix_to_quat(Rg @ so3.quat_to_matrix(q))
                            for q in base.rotation_cps])
            pos = base.position_cps @ Rg.T + tg
            traj2 = Trajectory(base.knot_vector, rot, pos, validate=False)
            n2 = Rg @ n
            d2 = f.plane_d - n2 @ tg
            f2 = LidarPlanarFactor(f.point_lidar, t, n2, d2)
            r2, _ = lidar_residual(f2, traj2, ext)
            assert r2 == pytest.approx(r0, abs=1e-9)


class TestReprojectionFactor:
    INTR = (100.0, 100.0, 50.0, 50.0)

    def test_on_axis(self):
        traj = constant_trajectory()
        f = ReprojectionFactor(np.array([0.0, 0.0, 4.0]), np.array([50.0, 50.0]),
                               0.45, self.INTR)
        r, _ = reprojection_residual(f, traj, ExtrinsicSet())
        assert np.allclose(r, [0.0, 0.0], atol=1e-12)

    def test_residual_sign(self):
        traj = constant_trajectory()
        f = ReprojectionFactor(np.array([0.0, 0.0, 4.0]), np.array([52.0, 50.0]),
                               0.45, self.INTR)
        r, _ = reprojection_residual(f, traj, ExtrinsicSet())
        assert np.allclose(r, [-2.0, 0.0], atol=1e-12)

    def test_behind_camera_dropped(self):
        traj = constant_trajectory()
        f = ReprojectionFactor(np.array([0.0, 0.0, -1.0]), np.array([50.0, 50.0]),
                               0.45, self.INTR)
        assert reprojection_residual(f, traj, ExtrinsicSet()) is None

    def test_jacobians_fd(self):
        rng = np.random.default_rng(52)
        done = 0
        while done < 20:
            traj = random_trajectory(rng)
            ext = random_extrinsics(rng)
            t = rng.uniform(traj.t_min + 1e-3, traj.t_max - 1e-3)
            R, p = traj.eval_pose(t)
            p_cam = rng.uniform([-1.0, -1.0, 2.0], [1.0, 1.0, 6.0])
            g = R @ (ext.R_ic @ p_cam + ext.p_ic) + p
            f = ReprojectionFactor(g, rng.uniform(0, 100, size=2), t, self.INTR)
            out = reprojection_residual(f, traj, ext)
            assert out is not None
            _, jac = out
            check_cp_jacobians(
                traj, t, lambda tr: reprojection_residual(f, tr, ext)[0], jac, 2)
            done += 1


class TestImuFactor:
    def test_static_consistency(self):
        traj = constant_trajectory()
        f = ImuFactor(0.45, np.zeros(3), np.array([0.0, 0.0, 9.8]))
        r, _ = imu_residual(f, traj, (np.zeros(3), np.zeros(3)), GRAVITY)
        assert np.allclose(r, 0.0, atol=1e-12)

    def test_gyro_bias_term(self):
        traj = constant_trajectory()
        f = ImuFactor(0.45, np.zeros(3), np.array([0.0, 0.0, 9.8]))
        bg = np.array([0.01, 0.0, 0.0])
        r, _ = imu_residual(f, traj, (bg, np.zeros(3)), GRAVITY)
        assert np.allclose(r[:3], bg, atol=1e-12)
        assert np.allclose(r[3:], 0.0, atol=1e-12)

    def test_zero_residual_on_synthesized_measurements(self):
        rng = np.random.default_rng(53)
        for _ in range(20):
            traj = random_trajectory(rng)
            t = rng.uniform(traj.t_min + 1e-3, traj.t_max - 1e-3)
            s = traj.eval_derivatives(t)
            gyro = s.angular_velocity_body
            accel = s.rotation.T @ (s.linear_acceleration_world - GRAVITY)
            f = ImuFactor(t, gyro, accel)
            r, _ = imu_residual(f, traj, (np.zeros(3), np.zeros(3)), GRAVITY)
            assert np.max(np.abs(r)) < 1e-10

    def test_jacobians_fd(self):
        rng = np.random.default_rng(54)
        for _ in range(15):
            traj = random_trajectory(rng)
            t = rng.uniform(traj.t_min + 1e-3, traj.t_max - 1e-3)
            f = ImuFactor(t, rng.normal(size=3), rng.normal(size=3))
            bias = (rng.normal(scale=0.01, size=3), rng.normal(scale=0.1, size=3))
            _, jac = imu_residual(f, traj, bias, GRAVITY)
            check_cp_jacobians(
                traj, t, lambda tr: imu_residual(f, tr, bias, GRAVITY)[0], jac, 6,
                rtol=3e-5)
            assert np.allclose(jac[("bias_g",)][:3], np.eye(3))
            assert np.allclose(jac[("bias_a",)][3:], np.eye(3))


class TestBiasFactor:
    def test_equal_biases(self):
        b = (np.array([1e-3, 0, 0]), np.array([0, 2e-2, 0]))
        r, _ = bias_residual(b, b)
        assert np.allclose(r, 0.0)

    def test_difference(self):
        r, _ = bias_residual((np.zeros(3), np.zeros(3)),
                             (np.array([0.0, 0.0, 1e-3]), np.zeros(3)))
        assert np.allclose(r[:3], [0.0, 0.0, 1e-3])
        assert np.allclose(r[3:], 0.0)

    def test_jacobian_signs(self):
        _, jac = bias_residual((np.zeros(3), np.zeros(3)), (np.zeros(3), np.zeros(3)))
        assert np.allclose(jac["curr_g"][:3], np.eye(3))
        assert np.allclose(jac["prev_g"][:3], -np.eye(3))


class TestCauchyWeight:
    def test_zero_residual(self):
        assert cauchy_weight(0.0, 2.0) == pytest.approx(1.0)

    def test_asymptote(self):
        assert cauchy_weight(1e6, 2.0) < 1e-10

    def test_monotone(self):
        for c in (0.5, 1.0, 2.0, 5.0):
            assert cauchy_weight(2.0 * c, c) < cauchy_weight(c, c)
        r = np.linspace(0.0, 50.0, 200)
        w = cauchy_weight(r, 2.0)
        assert np.all(np.diff(w) <= 0.0)
        assert np.all((w > 0.0) & (w <= 1.0))
