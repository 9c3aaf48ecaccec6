"""Measurement factors: residuals, whitening, robust kernel, Jacobians.

Four factor types constrain the sliding window: point-to-plane LiDAR,
frame-to-map pixel reprojection, raw-rate IMU, and the bias random walk.
Each analytic Jacobian is taken with respect to right-multiplied tangent
increments of the rotation control points (R <- R Exp(phi)) and plain
increments of position control points and biases, matching the solver's
retraction.

Scalar entry points (`lidar_residual`, ...) return the unwhitened residual
and a {(kind, control point index): jacobian} map and exist for unit tests
and one-off evaluation; the `*FactorGroup` classes batch factors that share
a trajectory segment and accumulate whitened Gauss-Newton blocks directly.
Residual evaluation is pure; groups may be evaluated concurrently as long
as the trajectory values are frozen per iteration.
"""

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .kernels import SegmentKernel, group_times_by_segment, kernel_at

DEPTH_MIN = 0.05


@dataclass
class ExtrinsicSet:
    """Pre-calibrated rigid transforms from sensor frames to the IMU frame."""

    T_imu_lidar: np.ndarray = field(default_factory=lambda: np.eye(4))
    T_imu_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    @property
    def R_il(self):
        return self.T_imu_lidar[:3, :3]

    @property
    def p_il(self):
        return self.T_imu_lidar[:3, 3]

    @property
    def R_ic(self):
        return self.T_imu_camera[:3, :3]

    @property
    def p_ic(self):
        return self.T_imu_camera[:3, 3]


@dataclass
class LidarPlanarFactor:
    point_lidar: np.ndarray     # meters, LiDAR frame
    t: float
    plane_normal: np.ndarray    # unit, world frame
    plane_d: float              # meters
    sigma: float = 0.05


@dataclass
class ReprojectionFactor:
    map_point_world: np.ndarray
    observed_pixel: np.ndarray
    t: float
    intrinsics: tuple           # (fx, fy, cx, cy) pixels
    sigma: float = 1.5
    cauchy_scale: float = 2.0


@dataclass
class ImuFactor:
    t: float
    gyro_meas: np.ndarray       # rad/s
    accel_meas: np.ndarray      # m/s^2, specific force
    sigma_g: float = 1.7e-3
    sigma_a: float = 2e-2


@dataclass
class BiasFactor:
    sigma_bg_walk: float = 1e-4
    sigma_ba_walk: float = 1e-3


def cauchy_weight(residual_norm, scale):
    """IRLS weight of the Cauchy kernel rho(s) = c^2 log(1 + s/c^2), s = r^2.

    weight(0) = 1, monotone non-increasing, -> 0 as the residual grows.
    """
    s = np.asarray(residual_norm, dtype=float) ** 2
    return 1.0 / (1.0 + s / (scale * scale))


def cauchy_cost(sq_norm, scale):
    """rho(s) for whitened squared norm s and whitened scale."""
    c2 = scale * scale
    return c2 * np.log1p(sq_norm / c2)


def _cp_jacobian_map(i, rot_jacs, pos_coeffs, row_shape, extra=None):
    """Assemble {(kind, cp index): J} from per-slot batched Jacobians (B=1)."""
    jac = {}
    for s in range(4):
        jac[("rot", i - 3 + s)] = rot_jacs[s].reshape(row_shape)
        jac[("pos", i - 3 + s)] = pos_coeffs[s].reshape(row_shape)
    if extra:
        jac.update(extra)
    return jac


def lidar_residual(factor, traj, extrinsics):
    """Point-to-plane residual r = n^T (R(t) q + p(t)) + d, q the point in IMU frame.

    Returns (scalar residual in meters, jacobians w.r.t. the segment's four
    rotation and four position control points).
    """
    n = np.asarray(factor.plane_normal, dtype=float)
    q_pt = extrinsics.R_il @ np.asarray(factor.point_lidar, dtype=float) + extrinsics.p_il
    i, k = kernel_at(traj, factor.t)
    p_world = k.R[0] @ q_pt + k.p[0]
    r = float(n @ p_world + factor.plane_d)
    G = k.jac_rotate_point(np.tile(q_pt, (1, 1)))
    rot_jacs = [n @ G[s][0] for s in range(4)]
    pos_jacs = [k.pos_coeffs[0, s] * n for s in range(4)]
    return r, _cp_jacobian_map(i, [g.reshape(1, 3) for g in rot_jacs],
                               [pj.reshape(1, 3) for pj in pos_jacs], (1, 3))


def _project(p_cam, intr):
    fx, fy, cx, cy = intr
    z = p_cam[2]
    return np.array([fx * p_cam[0] / z + cx, fy * p_cam[1] / z + cy])


def _projection_jacobian(p_cam, intr):
    fx, fy, cx, cy = intr
    x, y, z = p_cam
    return np.array([
        [fx / z, 0.0, -fx * x / (z * z)],
        [0.0, fy / z, -fy * y / (z * z)],
    ])


def reprojection_residual(factor, traj, extrinsics, depth_min=DEPTH_MIN):
    """Pixel residual r = project(camera point) - observed, or None if the
    transformed point falls closer than depth_min in front of the camera."""
    g = np.asarray(factor.map_point_world, dtype=float)
    i, k = kernel_at(traj, factor.t)
    R, p = k.R[0], k.p[0]
    w = g - p
    p_cam = extrinsics.R_ic.T @ (R.T @ w - extrinsics.p_ic)
    if p_cam[2] < depth_min:
        return None
    r = _project(p_cam, factor.intrinsics) - np.asarray(factor.observed_pixel, dtype=float)
    Jproj = _projection_jacobian(p_cam, factor.intrinsics)
    Jpc = Jproj @ extrinsics.R_ic.T           # 2x3 w.r.t. R^T w
    G = k.jac_inverse_rotate_point(w.reshape(1, 3))
    rot_jacs = [Jpc @ G[s][0] for s in range(4)]
    # positions enter through w = g - p(t)
    pos_jacs = [-k.pos_coeffs[0, s] * (Jpc @ R.T) for s in range(4)]
    return r, _cp_jacobian_map(i, [j.reshape(2, 3) for j in rot_jacs],
                               [j.reshape(2, 3) for j in pos_jacs], (2, 3))


def imu_residual(factor, traj, bias, gravity_world):
    """Six-vector residual stacking rate and specific-force consistency:

    r = [ omega(t) - omega_m + b_g ;  R^T(a_world - g) - a_m + b_a ]
    """
    b_g, b_a = bias
    i, k = kernel_at(traj, factor.t)
    a_body = k.R[0].T @ (k.a[0] - gravity_world)
    r = np.concatenate([
        k.omega[0] - factor.gyro_meas + b_g,
        a_body - factor.accel_meas + b_a,
    ])
    Jw = k.jac_omega()
    Ga = k.jac_inverse_rotate_point((k.a[0] - gravity_world).reshape(1, 3))
    jac = {}
    for s in range(4):
        Jrot = np.zeros((6, 3))
        Jrot[:3] = Jw[s][0]
        Jrot[3:] = Ga[s][0]
        jac[("rot", i - 3 + s)] = Jrot
        Jpos = np.zeros((6, 3))
        Jpos[3:] = k.acc_coeffs[0, s] * k.R[0].T
        jac[("pos", i - 3 + s)] = Jpos
    Jbg = np.zeros((6, 3))
    Jbg[:3] = np.eye(3)
    Jba = np.zeros((6, 3))
    Jba[3:] = np.eye(3)
    jac[("bias_g",)] = Jbg
    jac[("bias_a",)] = Jba
    return r, jac


def bias_residual(b_prev, b_curr):
    """Random-walk residual r = (b_g' - b_g, b_a' - b_a)."""
    bg0, ba0 = b_prev
    bg1, ba1 = b_curr
    r = np.concatenate([bg1 - bg0, ba1 - ba0])
    I, O = np.eye(3), np.zeros((3, 3))
    jac = {
        "prev_g": np.vstack([-I, O]), "prev_a": np.vstack([O, -I]),
        "curr_g": np.vstack([I, O]), "curr_a": np.vstack([O, I]),
    }
    return r, jac


# ----------------------------------------------------------- batched groups

class _SegmentBatch:
    """Per-segment precomputation shared by the batched factor groups."""

    def __init__(self, traj, i, ts, cp_slot_offsets):
        self.i = i
        Mc, t0, dt = traj.segment_matrices(i)
        self.Mc, self.t0, self.dt = Mc, t0, dt
        self.ts = np.asarray(ts, dtype=float)
        self.base = i - 3
        # window-local tangent offsets of the four rot / four pos blocks
        self.rot_off = [cp_slot_offsets("rot", self.base + s) for s in range(4)]
        self.pos_off = [cp_slot_offsets("pos", self.base + s) for s in range(4)]

    def kernel(self, rot_values, pos_values, with_jacobians):
        rot = np.stack([rot_values(self.base + s) for s in range(4)])
        pos = np.stack([pos_values(self.base + s) for s in range(4)])
        return SegmentKernel(self.Mc, self.t0, self.dt, rot, pos, self.ts,
                             with_jacobians=with_jacobians)


def _scatter(H, b, idx, Hl, bl):
    H[np.ix_(idx, idx)] += Hl
    b[idx] += bl


class ImuFactorGroup:
    """All IMU factors of one window, batched by spline segment."""

    def __init__(self, traj, factors, window, gravity_world,
                 bias_blocks=None, fixed_bias=None):
        self.window = window
        self.gravity = np.asarray(gravity_world, dtype=float)
        self.bias_blocks = bias_blocks  # block indices (bg, ba) or None
        self.fixed_bias = fixed_bias
        if bias_blocks is not None:
            self.bias_offsets = (window.problem.block_offset(bias_blocks[0]),
                                 window.problem.block_offset(bias_blocks[1]))
        ts = np.array([f.t for f in factors])
        groups = group_times_by_segment(traj.knot_vector, ts)
        self.batches = []
        for i, idxs in groups.items():
            sb = _SegmentBatch(traj, i, ts[idxs], window.cp_offset)
            sb.gyro = np.stack([factors[j].gyro_meas for j in idxs])
            sb.accel = np.stack([factors[j].accel_meas for j in idxs])
            sb.inv_sg = 1.0 / factors[idxs[0]].sigma_g
            sb.inv_sa = 1.0 / factors[idxs[0]].sigma_a
            self.batches.append(sb)

    def _bias(self, values):
        if self.bias_blocks is not None:
            return values[self.bias_blocks[0]], values[self.bias_blocks[1]]
        return self.fixed_bias

    def _residuals(self, values, sb, kernel):
        b_g, b_a = self._bias(values)
        a_body = np.einsum("bji,bj->bi", kernel.R, kernel.a - self.gravity)
        r_g = (kernel.omega - sb.gyro + b_g) * sb.inv_sg
        r_a = (a_body - sb.accel + b_a) * sb.inv_sa
        return r_g, r_a

    def cost(self, values):
        total = 0.0
        for sb in self.batches:
            k = sb.kernel(self.window.rot_value_fn(values), self.window.pos_value_fn(values), False)
            r_g, r_a = self._residuals(values, sb, k)
            total += 0.5 * (np.sum(r_g ** 2) + np.sum(r_a ** 2))
        return total

    def accumulate(self, values, H, b):
        total = 0.0
        nb = H.shape[0]
        for sb in self.batches:
            k = sb.kernel(self.window.rot_value_fn(values), self.window.pos_value_fn(values), True)
            r_g, r_a = self._residuals(values, sb, k)
            total += 0.5 * (np.sum(r_g ** 2) + np.sum(r_a ** 2))
            B = k.B
            # local stacked jacobian: [rot x4 | pos x4 | bg | ba]
            n_loc = 30 if self.bias_blocks is not None else 24
            Jgyr = np.zeros((B, 3, n_loc))
            Jacc = np.zeros((B, 3, n_loc))
            Jw = k.jac_omega()
            Ga = k.jac_inverse_rotate_point(k.a - self.gravity)
            Rt = np.transpose(k.R, (0, 2, 1))
            for s in range(4):
                Jgyr[:, :, 3 * s:3 * s + 3] = Jw[s] * sb.inv_sg
                Jacc[:, :, 3 * s:3 * s + 3] = Ga[s] * sb.inv_sa
                Jacc[:, :, 12 + 3 * s:15 + 3 * s] = (
                    k.acc_coeffs[:, s, None, None] * Rt * sb.inv_sa)
            idx = []
            for s in range(4):
                idx.extend(range(sb.rot_off[s], sb.rot_off[s] + 3))
            for s in range(4):
                idx.extend(range(sb.pos_off[s], sb.pos_off[s] + 3))
            if self.bias_blocks is not None:
                Jgyr[:, :, 24:27] = np.broadcast_to(np.eye(3) * sb.inv_sg, (B, 3, 3))
                Jacc[:, :, 27:30] = np.broadcast_to(np.eye(3) * sb.inv_sa, (B, 3, 3))
                idx.extend(range(self.bias_offsets[0], self.bias_offsets[0] + 3))
                idx.extend(range(self.bias_offsets[1], self.bias_offsets[1] + 3))
            idx = np.asarray(idx, dtype=int)
            Hl = np.einsum("bri,brj->ij", Jgyr, Jgyr) + np.einsum("bri,brj->ij", Jacc, Jacc)
            bl = np.einsum("bri,br->i", Jgyr, r_g) + np.einsum("bri,br->i", Jacc, r_a)
            _scatter(H, b, idx, Hl, bl)
        return total


class LidarFactorGroup:
    """Point-to-plane factors batched by spline segment."""

    def __init__(self, traj, factors, window, extrinsics):
        self.window = window
        self.R_il = extrinsics.R_il
        self.p_il = extrinsics.p_il
        ts = np.array([f.t for f in factors])
        groups = group_times_by_segment(traj.knot_vector, ts)
        self.batches = []
        for i, idxs in groups.items():
            sb = _SegmentBatch(traj, i, ts[idxs], window.cp_offset)
            pts = np.stack([factors[j].point_lidar for j in idxs])
            sb.q_pts = pts @ self.R_il.T + self.p_il
            sb.normals = np.stack([factors[j].plane_normal for j in idxs])
            sb.ds = np.array([factors[j].plane_d for j in idxs])
            sb.inv_s = 1.0 / np.array([factors[j].sigma for j in idxs])
            self.batches.append(sb)

    def _residuals(self, sb, k):
        p_world = np.einsum("bij,bj->bi", k.R, sb.q_pts) + k.p
        return (np.einsum("bi,bi->b", sb.normals, p_world) + sb.ds) * sb.inv_s

    def cost(self, values):
        total = 0.0
        for sb in self.batches:
            k = sb.kernel(self.window.rot_value_fn(values), self.window.pos_value_fn(values), False)
            r = self._residuals(sb, k)
            total += 0.5 * np.sum(r ** 2)
        return total

    def accumulate(self, values, H, b):
        total = 0.0
        for sb in self.batches:
            k = sb.kernel(self.window.rot_value_fn(values), self.window.pos_value_fn(values), True)
            r = self._residuals(sb, k)
            total += 0.5 * np.sum(r ** 2)
            B = k.B
            J = np.zeros((B, 24))
            G = k.jac_rotate_point(sb.q_pts)
            for s in range(4):
                J[:, 3 * s:3 * s + 3] = np.einsum("bi,bij->bj", sb.normals, G[s])
                J[:, 12 + 3 * s:15 + 3 * s] = k.pos_coeffs[:, s, None] * sb.normals
            J *= sb.inv_s[:, None]
            idx = []
            for s in range(4):
                idx.extend(range(sb.rot_off[s], sb.rot_off[s] + 3))
            for s in range(4):
                idx.extend(range(sb.pos_off[s], sb.pos_off[s] + 3))
            idx = np.asarray(idx, dtype=int)
            _scatter(H, b, idx, J.T @ J, J.T @ r)
        return total


class ReprojectionFactorGroup:
    """Frame-to-map reprojection factors with Cauchy IRLS weighting.

    Factors whose map point falls behind the camera (depth below depth_min)
    are dropped for the iteration and counted in `dropped`.
    """

    def __init__(self, traj, factors, window, extrinsics, depth_min=DEPTH_MIN):
        self.window = window
        self.R_ic = extrinsics.R_ic
        self.p_ic = extrinsics.p_ic
        self.depth_min = depth_min
        self.dropped = 0
        ts = np.array([f.t for f in factors])
        groups = group_times_by_segment(traj.knot_vector, ts)
        self.batches = []
        for i, idxs in groups.items():
            sb = _SegmentBatch(traj, i, ts[idxs], window.cp_offset)
            sb.points = np.stack([factors[j].map_point_world for j in idxs])
            sb.obs = np.stack([factors[j].observed_pixel for j in idxs])
            sb.intr = factors[idxs[0]].intrinsics
            sb.inv_s = 1.0 / factors[idxs[0]].sigma
            sb.cauchy_w = factors[idxs[0]].cauchy_scale
            self.batches.append(sb)

    def _residuals(self, sb, k):
        fx, fy, cx, cy = sb.intr
        w = sb.points - k.p
        body = np.einsum("bji,bj->bi", k.R, w)
        p_cam = np.einsum("ji,bj->bi", self.R_ic, body - self.p_ic)
        valid = p_cam[:, 2] >= self.depth_min
        z = np.where(valid, p_cam[:, 2], 1.0)
        pix = np.stack([fx * p_cam[:, 0] / z + cx, fy * p_cam[:, 1] / z + cy], axis=1)
        r = pix - sb.obs
        weights = cauchy_weight(np.linalg.norm(r, axis=1), sb.cauchy_w)
        weights = np.where(valid, weights, 0.0)
        return r * sb.inv_s, p_cam, w, weights, valid

    def _cost_of(self, r_white, weights, valid, sb):
        c_white = sb.cauchy_w * sb.inv_s
        sq = np.sum(r_white ** 2, axis=1)
        return 0.5 * np.sum(np.where(valid, cauchy_cost(sq, c_white), 0.0))

    def cost(self, values):
        total = 0.0
        for sb in self.batches:
            k = sb.kernel(self.window.rot_value_fn(values), self.window.pos_value_fn(values), False)
            r, _, _, wgt, valid = self._residuals(sb, k)
            total += self._cost_of(r, wgt, valid, sb)
        return total

    def accumulate(self, values, H, b):
        total = 0.0
        self.dropped = 0
        for sb in self.batches:
            k = sb.kernel(self.window.rot_value_fn(values), self.window.pos_value_fn(values), True)
            r, p_cam, w, wgt, valid = self._residuals(sb, k)
            total += self._cost_of(r, wgt, valid, sb)
            self.dropped += int(np.sum(~valid))
            fx, fy, cx, cy = sb.intr
            B = k.B
            x, y, z = p_cam[:, 0], p_cam[:, 1], np.where(valid, p_cam[:, 2], 1.0)
            Jproj = np.zeros((B, 2, 3))
            Jproj[:, 0, 0] = fx / z
            Jproj[:, 0, 2] = -fx * x / (z * z)
            Jproj[:, 1, 1] = fy / z
            Jproj[:, 1, 2] = -fy * y / (z * z)
            Jpc = Jproj @ self.R_ic.T[None]
            G = k.jac_inverse_rotate_point(w)
            Rt = np.transpose(k.R, (0, 2, 1))
            J = np.zeros((B, 2, 24))
            for s in range(4):
                J[:, :, 3 * s:3 * s + 3] = Jpc @ G[s]
                J[:, :, 12 + 3 * s:15 + 3 * s] = -k.pos_coeffs[:, s, None, None] * (Jpc @ Rt)
            scale = (np.sqrt(wgt) * sb.inv_s)[:, None, None]
            J *= scale
            r_irls = r * np.sqrt(wgt)[:, None]
            idx = []
            for s in range(4):
                idx.extend(range(sb.rot_off[s], sb.rot_off[s] + 3))
            for s in range(4):
                idx.extend(range(sb.pos_off[s], sb.pos_off[s] + 3))
            idx = np.asarray(idx, dtype=int)
            Hl = np.einsum("bri,brj->ij", J, J)
            bl = np.einsum("bri,br->i", J, r_irls)
            _scatter(H, b, idx, Hl, bl)
        return total


class BiasFactorGroup:
    """Random-walk factor linking previous and current bias blocks."""

    def __init__(self, factor, block_indices, offsets):
        # block_indices/offsets: (bg_prev, ba_prev, bg_curr, ba_curr)
        self.blocks = block_indices
        self.offsets = offsets
        self.inv_sg = 1.0 / factor.sigma_bg_walk
        self.inv_sa = 1.0 / factor.sigma_ba_walk

    def _residual(self, values):
        og, oa, ng, na = self.blocks
        return np.concatenate([
            (values[ng] - values[og]) * self.inv_sg,
            (values[na] - values[oa]) * self.inv_sa,
        ])

    def cost(self, values):
        return 0.5 * float(np.sum(self._residual(values) ** 2))

    def accumulate(self, values, H, b):
        og, oa, ng, na = self.offsets
        r = self._residual(values)
        J = np.zeros((6, H.shape[0]))
        J[:3, og:og + 3] = -np.eye(3) * self.inv_sg
        J[:3, ng:ng + 3] = np.eye(3) * self.inv_sg
        J[3:, oa:oa + 3] = -np.eye(3) * self.inv_sa
        J[3:, na:na + 3] = np.eye(3) * self.inv_sa
        H += J.T @ J
        b += J.T @ r
        return 0.5 * float(np.sum(r ** 2))
