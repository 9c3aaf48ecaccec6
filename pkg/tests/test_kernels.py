import numpy as np

from splineodom import so3
from splineodom.kernels import kernel_at, kernel_for_segment

from _helpers import random_trajectory


from splineodom.spline import Trajectory


def _perturb_rot_cp(traj, cp_idx, phi):
    rot = traj.rotation_cps.copy()
    rot[cp_idx] = so3.quat_multiply(rot[cp_idx], so3.quat_exp(phi))
    out = Trajectory(traj.knot_vector, rot, traj.position_cps.copy(), validate=False)
    out._seg_cache = traj._seg_cache
    return out


def test_kernel_matches_eval():
    rng = np.random.default_rng(30)
    for _ in range(20):
        traj = random_trajectory(rng)
        ts = rng.uniform(traj.t_min, traj.t_max - 1e-9, size=3)
        for t in ts:
            i, k = kernel_at(traj, t)
            s = traj.eval_derivatives(t)
            assert np.allclose(k.R[0], s.rotation, atol=1e-12)
            assert np.allclose(k.p[0], s.position, atol=1e-12)
            assert np.allclose(k.v[0], s.linear_velocity_world, atol=1e-10)
            assert np.allclose(k.a[0], s.linear_acceleration_world, atol=1e-9)
            assert np.allclose(k.omega[0], s.angular_velocity_body, atol=1e-10)


def test_kernel_batching_consistent():
    rng = np.random.default_rng(31)
    traj = random_trajectory(rng, n_segments=4)
    i = traj.knot_vector.segment_of(0.5 * (traj.t_min + traj.t_max))
    kv = traj.knot_vector
    ts = np.linspace(kv.knot(i) + 1e-6, kv.knot(i + 1) - 1e-6, 7)
    k = kernel_for_segment(traj, i, ts)
    for b, t in enumerate(ts):
        _, k1 = kernel_at(traj, t)
        assert np.allclose(k.R[b], k1.R[0], atol=1e-14)
        assert np.allclose(k.omega[b], k1.omega[0], atol=1e-14)


def _fd_rot_jacobian(traj, t, cp_idx, fn, h=1e-7):
    """Central FD of fn(traj, t) wrt right-perturbation of rotation CP cp_idx."""
    cols = []
    for ax in range(3):
        phi = np.zeros(3)
        phi[ax] = h
        tp = _perturb_rot_cp(traj, cp_idx, phi)
        tm = _perturb_rot_cp(traj, cp_idx, -phi)
        cols.append((fn(tp, t) - fn(tm, t)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def test_rotation_point_jacobian_fd():
    rng = np.random.default_rng(32)
    q_pt = np.array([0.4, -0.2, 1.1])
    for _ in range(25):
        traj = random_trajectory(rng)
        t = rng.uniform(traj.t_min + 1e-4, traj.t_max - 1e-4)
        i, k = kernel_at(traj, t)
        G = k.jac_rotate_point(np.tile(q_pt, (1, 1)))
        for s in range(4):
            cp = i - 3 + s
            J_fd = _fd_rot_jacobian(traj, t, cp, lambda tr, tt: tr.eval_pose(tt)[0] @ q_pt)
            assert np.allclose(G[s][0], J_fd, atol=2e-6)


def test_inverse_rotation_jacobian_fd():
    rng = np.random.default_rng(33)
    w = np.array([-1.0, 2.0, 0.3])
    for _ in range(25):
        traj = random_trajectory(rng)
        t = rng.uniform(traj.t_min + 1e-4, traj.t_max - 1e-4)
        i, k = kernel_at(traj, t)
        G = k.jac_inverse_rotate_point(np.tile(w, (1, 1)))
        for s in range(4):
            cp = i - 3 + s
            J_fd = _fd_rot_jacobian(traj, t, cp, lambda tr, tt: tr.eval_pose(tt)[0].T @ w)
            assert np.allclose(G[s][0], J_fd, atol=2e-6)


def test_omega_jacobian_fd():
    rng = np.random.default_rng(34)
    for _ in range(25):
        traj = random_trajectory(rng)
        t = rng.uniform(traj.t_min + 1e-4, traj.t_max - 1e-4)
        i, k = kernel_at(traj, t)
        G = k.jac_omega()
        for s in range(4):
            cp = i - 3 + s
            J_fd = _fd_rot_jacobian(
                traj, t, cp, lambda tr, tt: tr.eval_derivatives(tt).angular_velocity_body
            )
            scale = max(1.0, np.abs(J_fd).max())
            assert np.allclose(G[s][0], J_fd, atol=3e-5 * scale)
