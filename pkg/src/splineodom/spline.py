"""Non-uniform cumulative cubic B-splines over SO(3) and R^3.

A trajectory is a pair of splines sharing one non-uniform knot vector:
rotation control points (unit quaternions, combined in cumulative form) and
position control points. With knots t_0 < t_1 < ... < t_{N-1} the package
uses the convention

  - control point j drives basis N_{j,3} supported on [t_j, t_{j+4}),
  - there are N-1 control points for N knots,
  - the evaluation domain is [t_3, t_{N-1}); a query in segment
    [t_i, t_{i+1}) involves control points i-3..i and knots t_{i-2}..t_{i+3},
  - the up-to-two trailing knots a segment matrix needs beyond the stored
    ones are extrapolated at the trailing knot spacing until real knots are
    appended ("virtual tail"); extending the trajectory therefore only
    changes evaluation inside the support of the trailing three control
    points.

Blending matrices are computed per segment from the knots by carrying the
Cox-de Boor recurrence on exact polynomial coefficients in the normalized
segment time u = (t - t_i) / (t_{i+1} - t_i). For uniformly spaced knots
this reproduces the classical uniform cubic matrix.

Evaluation is a pure read and safe to share across threads; extending or
writing control points requires exclusive access.
"""

from dataclasses import dataclass

import numpy as np

from . import so3

DEGREE = 3


class DomainError(ValueError):
    """Query time outside the spline's evaluation domain."""


class KnotVector:
    """Strictly increasing knot timestamps for a cubic B-spline."""

    def __init__(self, knots):
        knots = np.asarray(knots, dtype=float)
        if knots.ndim != 1 or knots.size < 2:
            raise ValueError("need at least two knots")
        if not np.all(np.diff(knots) > 0.0):
            raise ValueError("knots must be strictly increasing")
        self.knots = knots
        self.degree = DEGREE

    def __len__(self):
        return self.knots.size

    def knot(self, i):
        """Knot time, extrapolating past the end at the trailing spacing."""
        n = self.knots.size
        if 0 <= i < n:
            return float(self.knots[i])
        if i >= n:
            h = self.knots[-1] - self.knots[-2]
            return float(self.knots[-1] + (i - n + 1) * h)
        raise DomainError(f"knot index {i} out of range")

    @property
    def t_min(self):
        """Start of the evaluation domain (inclusive)."""
        return float(self.knots[DEGREE])

    @property
    def t_max(self):
        """End of the evaluation domain (exclusive)."""
        return float(self.knots[-1])

    def segment_of(self, t, closed=False):
        """Segment index i with knots[i] <= t < knots[i+1].

        With closed=True, t equal to the domain end maps to the last
        segment (u = 1), which is the left-sided limit.
        """
        t = float(t)
        if t < self.t_min or t > self.t_max or (t == self.t_max and not closed):
            raise DomainError(f"t={t} outside domain [{self.t_min}, {self.t_max})")
        if t == self.t_max:
            return self.knots.size - 2
        i = int(np.searchsorted(self.knots, t, side="right")) - 1
        return i

    def extend(self, new_knots):
        new_knots = np.asarray(new_knots, dtype=float)
        if new_knots.size == 0:
            return
        merged = np.concatenate([self.knots, new_knots])
        if not np.all(np.diff(merged) > 0.0):
            raise ValueError("new knots must be strictly increasing past the last knot")
        self.knots = merged


def blending_matrix(knot_vector, i):
    """4x4 blending matrix of segment i from the six knots t_{i-2}..t_{i+3}.

    Row a, column j holds the u^a coefficient of the j-th active basis
    polynomial, so the basis values at u are [1, u, u^2, u^3] @ M. Computed
    by the Cox-de Boor recurrence carried on polynomial coefficients, which
    covers uniform and non-uniform knots with one algorithm.
    """
    kv = knot_vector
    n = len(kv)
    if i < 2 or i > n - 2:
        raise DomainError(f"segment {i} needs knots {i - 2}..{i + 1} inside the vector")
    t_i = kv.knot(i)
    dt_i = kv.knot(i + 1) - t_i

    # level-0 seed: the indicator of segment i is the constant polynomial 1
    level = {i: np.array([1.0, 0.0, 0.0, 0.0])}
    for p in range(1, DEGREE + 1):
        nxt = {}
        for j in range(i - p, i + 1):
            acc = np.zeros(4)
            left = level.get(j)
            if left is not None:
                den = kv.knot(j + p) - kv.knot(j)
                if den > 0.0:
                    a0 = (t_i - kv.knot(j)) / den
                    a1 = dt_i / den
                    acc[:] += a0 * left
                    acc[1:] += a1 * left[:3]
            right = level.get(j + 1)
            if right is not None:
                den = kv.knot(j + p + 1) - kv.knot(j + 1)
                if den > 0.0:
                    b0 = (kv.knot(j + p + 1) - t_i) / den
                    b1 = -dt_i / den
                    acc[:] += b0 * right
                    acc[1:] += b1 * right[:3]
            nxt[j] = acc
        level = nxt

    M = np.zeros((4, 4))
    for jj in range(4):
        M[:, jj] = level[i - DEGREE + jj]
    return M


def cumulative_blending_matrix(M):
    """Cumulative form of a blending matrix.

    Row m holds the u-power coefficients of the m-th cumulative basis,
    obtained by summing the basis polynomials m..3; equivalently the
    reversed cumulative sum over the rows of M^T. For any matrix whose
    basis polynomials partition unity the first row is (1, 0, 0, 0).
    """
    Mt = np.asarray(M, dtype=float).T
    return np.cumsum(Mt[::-1], axis=0)[::-1].copy()


@dataclass
class PoseSample:
    """Pose and temporal derivatives at one query time.

    rotation is world-from-body; angular velocity is expressed in the body
    frame (rad/s), linear velocity and acceleration in the world frame.
    """

    t: float
    rotation: np.ndarray
    position: np.ndarray
    angular_velocity_body: np.ndarray
    linear_velocity_world: np.ndarray
    linear_acceleration_world: np.ndarray


_U_POW = np.array([1.0, 1.0, 1.0, 1.0])


class Trajectory:
    """Paired SO(3)/R^3 cumulative cubic B-splines on a shared knot vector.

    rotation_cps is an (n, 4) array of unit quaternions [x, y, z, w] and
    position_cps an (n, 3) array of meters, with n = len(knots) - 1.
    """

    def __init__(self, knot_vector, rotation_cps, position_cps, validate=True):
        self.knot_vector = knot_vector
        self.rotation_cps = np.asarray(rotation_cps, dtype=float).reshape(-1, 4)
        self.position_cps = np.asarray(position_cps, dtype=float).reshape(-1, 3)
        self._seg_cache = {}
        if validate:
            self._validate()

    def _validate(self):
        n_cp = self.rotation_cps.shape[0]
        if self.position_cps.shape[0] != n_cp:
            raise ValueError("rotation and position control point counts differ")
        if n_cp != len(self.knot_vector) - 1:
            raise ValueError("need exactly len(knots) - 1 control points")
        norms = np.linalg.norm(self.rotation_cps, axis=1)
        if not np.all(np.abs(norms - 1.0) < 1e-9):
            raise ValueError("rotation control points must be unit quaternions")

    @classmethod
    def initial(cls, t0, lead_dt, rotation=None, position=None):
        """Trajectory seeded for extension at t0.

        Creates the degree+1 lead-in knots ending at t0 (spaced lead_dt,
        typically the first interval length) and degree identical control
        points; the evaluation domain starts at t0 and is empty until the
        first extension appends control points timed in the first interval.
        """
        q = so3.quat_identity() if rotation is None else so3.matrix_to_quat(rotation)
        p = np.zeros(3) if position is None else np.asarray(position, dtype=float)
        knots = t0 + lead_dt * np.arange(-DEGREE, 1)
        rot = np.tile(q, (DEGREE, 1))
        pos = np.tile(p, (DEGREE, 1))
        return cls(KnotVector(knots), rot, pos)

    @property
    def t_min(self):
        return self.knot_vector.t_min

    @property
    def t_max(self):
        return self.knot_vector.t_max

    @property
    def n_control_points(self):
        return self.rotation_cps.shape[0]

    def segment_matrices(self, i):
        """Cached (cumulative matrix, segment start, segment width) for segment i."""
        entry = self._seg_cache.get(i)
        if entry is None:
            M = blending_matrix(self.knot_vector, i)
            Mc = cumulative_blending_matrix(M)
            t_i = self.knot_vector.knot(i)
            dt = self.knot_vector.knot(i + 1) - t_i
            entry = (Mc, t_i, dt)
            self._seg_cache[i] = entry
        return entry

    def _segment_state(self, t, closed=False):
        i = self.knot_vector.segment_of(t, closed=closed)
        Mc, t_i, dt = self.segment_matrices(i)
        u = (t - t_i) / dt
        return i, Mc, u, dt

    def control_point_span(self, i):
        """Global control point indices driving segment i."""
        return range(i - DEGREE, i + 1)

    def eval_pose(self, t, closed=False):
        """Pose at time t: (rotation matrix world-from-body, position)."""
        i, Mc, u, _ = self._segment_state(t, closed=closed)
        upow = np.array([1.0, u, u * u, u * u * u])
        lam = Mc @ upow
        base = i - DEGREE
        q = self.rotation_cps[base]
        p = self.position_cps[base].copy()
        for j in range(1, DEGREE + 1):
            qa = self.rotation_cps[base + j - 1]
            qb = self.rotation_cps[base + j]
            d = so3.quat_log(so3.quat_multiply(so3.quat_conjugate(qa), qb))
            q = so3.quat_multiply(q, so3.quat_exp(lam[j] * d))
            p += lam[j] * (self.position_cps[base + j] - self.position_cps[base + j - 1])
        return so3.quat_to_matrix(so3.quat_normalize(q)), p

    def eval_derivatives(self, t, closed=False):
        """PoseSample with analytic first/second temporal derivatives.

        Angular velocity comes from the product-rule derivative of the
        cumulative rotation spline, omega = vee(R^T dR/dt); translation
        derivatives from the differentiated basis polynomials. The basis
        derivatives include the 1/(t_{i+1}-t_i) chain factor per order.
        """
        i, Mc, u, dt = self._segment_state(t, closed=closed)
        upow = np.array([1.0, u, u * u, u * u * u])
        dupow = np.array([0.0, 1.0, 2.0 * u, 3.0 * u * u])
        ddupow = np.array([0.0, 0.0, 2.0, 6.0 * u])
        lam = Mc @ upow
        lam_d = (Mc @ dupow) / dt
        lam_dd = (Mc @ ddupow) / (dt * dt)

        base = i - DEGREE
        R0 = so3.quat_to_matrix(self.rotation_cps[base])
        A = []
        Adot = []
        p = self.position_cps[base].copy()
        v = np.zeros(3)
        a = np.zeros(3)
        for j in range(1, DEGREE + 1):
            qa = self.rotation_cps[base + j - 1]
            qb = self.rotation_cps[base + j]
            d = so3.quat_log(so3.quat_multiply(so3.quat_conjugate(qa), qb))
            Aj = so3.so3_exp(lam[j] * d)
            A.append(Aj)
            Adot.append(Aj @ so3.skew(lam_d[j] * d))
            dp = self.position_cps[base + j] - self.position_cps[base + j - 1]
            p += lam[j] * dp
            v += lam_d[j] * dp
            a += lam_dd[j] * dp

        R = R0 @ A[0] @ A[1] @ A[2]
        Rdot = R0 @ (Adot[0] @ A[1] @ A[2] + A[0] @ Adot[1] @ A[2] + A[0] @ A[1] @ Adot[2])
        W = R.T @ Rdot
        W = 0.5 * (W - W.T)
        omega = np.array([W[2, 1], W[0, 2], W[1, 0]])
        return PoseSample(t, R, p, omega, v, a)

    def extend(self, new_knots, new_rotation_cps, new_position_cps):
        """Append knots and paired control points past the current end.

        Evaluation before the support of the trailing three control points
        is unchanged; the trailing two segments pick up the real knot
        spacing that replaces the extrapolated tail.
        """
        new_knots = np.atleast_1d(np.asarray(new_knots, dtype=float))
        new_rot = np.asarray(new_rotation_cps, dtype=float).reshape(-1, 4)
        new_pos = np.asarray(new_position_cps, dtype=float).reshape(-1, 3)
        if not (new_knots.size == new_rot.shape[0] == new_pos.shape[0]):
            raise ValueError("knot and control point counts must match")
        norms = np.linalg.norm(new_rot, axis=1)
        if not np.all(np.abs(norms - 1.0) < 1e-9):
            raise ValueError("rotation control points must be unit quaternions")
        self.knot_vector.extend(new_knots)
        self.rotation_cps = np.vstack([self.rotation_cps, new_rot])
        self.position_cps = np.vstack([self.position_cps, new_pos])
        self._seg_cache.clear()

    def set_control_point(self, idx, rotation_q=None, position=None):
        if rotation_q is not None:
            self.rotation_cps[idx] = so3.quat_normalize(rotation_q)
        if position is not None:
            self.position_cps[idx] = position

    # ------------------------------------------------------------------ io

    def save_text(self, path):
        """Text format: header `knots: t0 t1 ...`, one `qx qy qz qw px py pz` per CP."""
        with open(path, "w") as f:
            f.write("knots: " + " ".join(f"{t:.9f}" for t in self.knot_vector.knots) + "\n")
            for q, p in zip(self.rotation_cps, self.position_cps):
                f.write(" ".join(f"{v:.12g}" for v in (*q, *p)) + "\n")

    @classmethod
    def load_text(cls, path):
        with open(path) as f:
            header = f.readline().strip()
            if not header.startswith("knots:"):
                raise ValueError("missing knots header")
            knots = np.array([float(v) for v in header.split()[1:]])
            rows = [np.array([float(v) for v in line.split()]) for line in f if line.strip()]
        rows = np.asarray(rows)
        return cls(KnotVector(knots), rows[:, :4], rows[:, 4:7])

    def sample_tum(self, rate_hz=100.0):
        """Dense pose samples `timestamp tx ty tz qx qy qz qw` at rate_hz."""
        lines = []
        t = self.t_min
        step = 1.0 / rate_hz
        while t < self.t_max - 1e-12:
            R, p = self.eval_pose(t)
            q = so3.matrix_to_quat(R)
            lines.append(
                f"{t:.6f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}"
            )
            t += step
        return "\n".join(lines) + "\n"

    def save_tum(self, path, rate_hz=100.0):
        with open(path, "w") as f:
            f.write(self.sample_tum(rate_hz))


# --------------------------------------------------------- module-level ops

def segment_lookup(knot_vector, t):
    """Segment index i with knots[i] <= t < knots[i+1]; domain error outside."""
    return knot_vector.segment_of(t)


def eval_pose(traj, t):
    return traj.eval_pose(t)


def eval_derivatives(traj, t):
    return traj.eval_derivatives(t)


def extend(traj, new_knots, new_rotation_cps, new_position_cps):
    traj.extend(new_knots, new_rotation_cps, new_position_cps)
    return traj
