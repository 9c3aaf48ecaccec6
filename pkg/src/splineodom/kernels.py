"""Batched per-segment spline evaluation with analytic Jacobian terms.

Factor residuals need, at many query times inside one spline segment, the
pose, its temporal derivatives, and the derivatives of those quantities
with respect to right-multiplied tangent perturbations of the four control
points driving the segment. All rotation increments of a segment share a
fixed axis, so batching over query times reduces to scalar sin/cos arrays
times fixed 3x3 matrices.

Writing the rotation R(t) = R0 A1 A2 A3 with Aj = Exp(lam_j d_j) and
d_j = Log(R_{j-1}^{-1} R_j), a control point perturbation propagates into
the increments d_j (through the log's left/right inverse Jacobians) and,
for the first control point, directly into R0. The resulting variation is
a sum of terms L_a (K phi)^ Rbar_a with partial products
L_a = R0 A1..A_a and Rbar_a = A_{a+1}..A3, which is the representation the
factor Jacobians fold against.
"""

import numpy as np

from . import so3

_EYE3 = np.eye(3)


def batched_skew(v):
    """(B,3) -> (B,3,3) skew-symmetric matrices."""
    v = np.asarray(v, dtype=float)
    B = v.shape[0]
    S = np.zeros((B, 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


def _axis_angle_rotations(theta, K, K2):
    """Exp(theta * axis) for a batch of angles about one fixed unit axis."""
    s = np.sin(theta)[:, None, None]
    c = (1.0 - np.cos(theta))[:, None, None]
    return _EYE3[None] + s * K[None] + c * K2[None]


def _axis_angle_right_jacobians(theta, K, K2):
    """J_r(theta * axis) batched about one fixed unit axis."""
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(np.abs(theta) > 1e-9, (1.0 - np.cos(theta)) / theta, 0.5 * theta)
        b = np.where(np.abs(theta) > 1e-9, 1.0 - np.sin(theta) / theta, theta * theta / 6.0)
    return _EYE3[None] - a[:, None, None] * K[None] + b[:, None, None] * K2[None]


class SegmentKernel:
    """Pose, derivatives and control-point Jacobian terms at batched times.

    All arrays are batched over the leading axis B (one entry per query
    time). Control point slots s = 0..3 refer to the four control points
    of the segment in ascending index order.
    """

    def __init__(self, Mc, t0, dt, rot_quats, pos_cps, ts, with_jacobians=True):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        u = (ts - t0) / dt
        B = u.size
        upow = np.stack([np.ones(B), u, u * u, u ** 3], axis=1)
        dupow = np.stack([np.zeros(B), np.ones(B), 2.0 * u, 3.0 * u * u], axis=1)
        ddupow = np.stack([np.zeros(B), np.zeros(B), np.full(B, 2.0), 6.0 * u], axis=1)
        lam = upow @ Mc.T
        lam_d = (dupow @ Mc.T) / dt
        lam_dd = (ddupow @ Mc.T) / (dt * dt)
        self.ts = ts
        self.B = B
        self.lam, self.lam_d, self.lam_dd = lam, lam_d, lam_dd

        # translation: cumulative-difference coefficients per control point slot
        self.pos_coeffs = self._difference_coeffs(lam)
        self.vel_coeffs = self._difference_coeffs(lam_d, cumulative_zero=True)
        self.acc_coeffs = self._difference_coeffs(lam_dd, cumulative_zero=True)
        pos_cps = np.asarray(pos_cps, dtype=float)
        self.p = self.pos_coeffs @ pos_cps
        self.v = self.vel_coeffs @ pos_cps
        self.a = self.acc_coeffs @ pos_cps

        # rotation increments d_j with fixed axes
        R0 = so3.quat_to_matrix(rot_quats[0])
        d = []
        for j in range(1, 4):
            rel = so3.quat_multiply(so3.quat_conjugate(rot_quats[j - 1]), rot_quats[j])
            d.append(so3.quat_log(rel))
        self.d = d

        A = []
        C = [] if with_jacobians else None
        u_vecs = []
        for j in range(3):
            dn = np.linalg.norm(d[j])
            if dn < 1e-14:
                axis = np.zeros(3)
                K = np.zeros((3, 3))
            else:
                axis = d[j] / dn
                K = so3.skew(axis)
            K2 = K @ K
            theta = lam[:, j + 1] * dn
            A.append(_axis_angle_rotations(theta, K, K2))
            u_vecs.append(lam_d[:, j + 1, None] * d[j][None, :])
            if with_jacobians:
                Jr = _axis_angle_right_jacobians(theta, K, K2)
                C.append(lam[:, j + 1, None, None] * Jr)
        self.A = A
        self.u_vecs = u_vecs

        # partial products L_a = R0 A1..Aa (L[0] is the fixed base rotation)
        L = [np.broadcast_to(R0, (B, 3, 3))]
        L.append(R0[None] @ A[0])
        L.append(L[1] @ A[1])
        L.append(L[2] @ A[2])
        self.L = L
        Rbar = [None] * 4
        Rbar[3] = np.broadcast_to(_EYE3, (B, 3, 3))
        Rbar[2] = A[2]
        Rbar[1] = A[1] @ A[2]
        Rbar[0] = A[0] @ Rbar[1]
        self.Rbar = Rbar
        self.R = L[3]

        # body angular velocity from the fixed-axis closed form
        w = np.einsum("bji,bj->bi", Rbar[1], u_vecs[0])
        w += np.einsum("bji,bj->bi", Rbar[2], u_vecs[1])
        w += u_vecs[2]
        self.omega = w

        if with_jacobians:
            self.C = C
            self.Jrinv = [so3.right_jacobian_inv(d[j]) for j in range(3)]
            self.Jlinv = [so3.left_jacobian_inv(d[j]) for j in range(3)]
            self._build_terms()

    @staticmethod
    def _difference_coeffs(lam, cumulative_zero=False):
        """Per-slot coefficients of sum_j lam_j (x_j - x_{j-1}).

        Slot 0 keeps the lam_0 term (1 for the value itself, 0 for the
        differentiated weights, where the constant cumulative row drops out).
        """
        B = lam.shape[0]
        c = np.empty((B, 4))
        lead = 0.0 if cumulative_zero else 1.0
        c[:, 0] = lead - lam[:, 1]
        c[:, 1] = lam[:, 1] - lam[:, 2]
        c[:, 2] = lam[:, 2] - lam[:, 3]
        c[:, 3] = lam[:, 3]
        return c

    def _build_terms(self):
        """Decomposition dR = sum_a L_a ((K phi_s)^) Rbar_a per CP slot s."""
        eye = np.broadcast_to(_EYE3, (self.B, 3, 3))
        CJr = [self.C[j] @ self.Jrinv[j] for j in range(3)]
        CJl = [self.C[j] @ self.Jlinv[j] for j in range(3)]
        self.terms = [
            [(0, eye), (1, -CJl[0])],
            [(1, CJr[0]), (2, -CJl[1])],
            [(2, CJr[1]), (3, -CJl[2])],
            [(3, CJr[2])],
        ]

    def jac_rotate_point(self, q):
        """d(R q)/d phi_s for a batched point q (B,3); list of 4 (B,3,3)."""
        out = []
        for s in range(4):
            G = np.zeros((self.B, 3, 3))
            for a, K in self.terms[s]:
                G -= self.L[a] @ batched_skew(np.einsum("bij,bj->bi", self.Rbar[a], q)) @ K
            out.append(G)
        return out

    def jac_inverse_rotate_point(self, w):
        """d(R^T w)/d phi_s for a batched vector w (B,3); list of 4 (B,3,3)."""
        out = []
        for s in range(4):
            G = np.zeros((self.B, 3, 3))
            for a, K in self.terms[s]:
                Lt_w = np.einsum("bji,bj->bi", self.L[a], w)
                G += np.transpose(self.Rbar[a], (0, 2, 1)) @ batched_skew(Lt_w) @ K
            out.append(G)
        return out

    def jac_omega(self):
        """d omega_body / d phi_s; list of 4 (B,3,3)."""
        Rb1t = np.transpose(self.Rbar[1], (0, 2, 1))
        Rb2t = np.transpose(self.Rbar[2], (0, 2, 1))
        A2t_u1 = np.einsum("bji,bj->bi", self.A[1], self.u_vecs[0])
        W1 = self.lam_d[:, 1, None, None] * Rb1t
        W2 = Rb2t @ (batched_skew(A2t_u1) @ self.C[1]
                     + self.lam_d[:, 2, None, None] * _EYE3[None])
        w_sum = (np.einsum("bij,bj->bi", Rb1t, self.u_vecs[0])
                 + np.einsum("bij,bj->bi", Rb2t, self.u_vecs[1]))
        W3 = batched_skew(w_sum) @ self.C[2] + self.lam_d[:, 3, None, None] * _EYE3[None]
        return [
            -W1 @ self.Jlinv[0],
            W1 @ self.Jrinv[0] - W2 @ self.Jlinv[1],
            W2 @ self.Jrinv[1] - W3 @ self.Jlinv[2],
            W3 @ self.Jrinv[2],
        ]


def kernel_for_segment(traj, i, ts, with_jacobians=True):
    """SegmentKernel for trajectory segment i at times ts (all inside it)."""
    Mc, t0, dt = traj.segment_matrices(i)
    base = i - 3
    rot = traj.rotation_cps[base:base + 4]
    pos = traj.position_cps[base:base + 4]
    return SegmentKernel(Mc, t0, dt, rot, pos, ts, with_jacobians=with_jacobians)


def kernel_at(traj, t, with_jacobians=True, closed=False):
    """Single-time kernel; returns (segment index, SegmentKernel with B=1)."""
    i = traj.knot_vector.segment_of(t, closed=closed)
    return i, kernel_for_segment(traj, i, [t], with_jacobians=with_jacobians)


def group_times_by_segment(knot_vector, ts):
    """Map segment index -> indices of ts falling inside it (domain-checked)."""
    ts = np.asarray(ts, dtype=float)
    out = {}
    for idx, t in enumerate(ts):
        i = knot_vector.segment_of(float(t))
        out.setdefault(i, []).append(idx)
    return {i: np.array(v, dtype=int) for i, v in out.items()}


def batch_eval_pose(traj, ts, closed=False):
    """Poses at many times: (R (n,3,3), p (n,3)), grouped by segment."""
    ts = np.asarray(ts, dtype=float)
    R = np.empty((ts.size, 3, 3))
    p = np.empty((ts.size, 3))
    groups = {}
    for idx, t in enumerate(ts):
        i = traj.knot_vector.segment_of(float(t), closed=closed)
        groups.setdefault(i, []).append(idx)
    for i, idxs in groups.items():
        idxs = np.asarray(idxs, dtype=int)
        k = kernel_for_segment(traj, i, ts[idxs], with_jacobians=False)
        R[idxs] = k.R
        p[idxs] = k.p
    return R, p
