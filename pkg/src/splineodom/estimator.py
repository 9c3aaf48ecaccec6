"""Per-interval sliding-window odometry pipeline.

Each interval runs placement -> bootstrap -> joint LiDAR/IMU/camera
optimization -> marginalization -> map updates, exactly in that order. The
system starts stationary: the first half second of IMU data initializes
the biases, and an anchoring prior fixes the initial pose at the origin.

An interval may complete in degraded mode (no camera frame, empty local
map, or a failed solve keeps the bootstrap estimate); failures are counted
in the logs rather than aborting the run.
"""

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import so3
from .camera import CameraModel
from .factors import BiasFactor, ImuFactor, LidarPlanarFactor
from .kernels import batch_eval_pose
from .maps import (
    GlobalVoxelMap,
    LocalMap,
    TrackedPointSet,
    VisualFrontendConfig,
    associate_frame,
    fit_plane,
    voxel_downsample,
)
from .placement import (
    GravityVector,
    PlacementPolicy,
    append_and_initialize,
    bootstrap_optimize,
    decide_count,
    motion_stats,
)
from .solver import SolverError, SolverSettings, anchor_prior, solve_lm
from .spline import Trajectory
from .window import WindowState, build_window_problem, marginalize_window, write_back

logger = logging.getLogger(__name__)


class EstimatorError(RuntimeError):
    pass


def _sigma(value, floor=1e-5):
    """Measurement sigmas stay positive even when the sim runs noise-free.

    The floors also bound the whitening scale so the normal equations stay
    well conditioned in float64.
    """
    return max(float(value), floor)


@dataclass
class IntervalLog:
    t_start: float
    n_cp: int
    n_lidar: int
    n_visual: int
    n_imu: int
    iters: int
    final_cost: float
    solve_ms: float
    n_g: float = 0.0
    n_a: float = 0.0
    flagged: bool = False


@dataclass
class RunResult:
    trajectory: Trajectory
    intervals: list = field(default_factory=list)
    n_failed: int = 0

    def interval_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t_start", "n_cp", "n_lidar_factors", "n_visual_factors",
                        "n_imu_factors", "iters", "final_cost", "solve_ms"])
            for r in self.intervals:
                w.writerow([f"{r.t_start:.6f}", r.n_cp, r.n_lidar, r.n_visual,
                            r.n_imu, r.iters, f"{r.final_cost:.9e}",
                            f"{r.solve_ms:.3f}"])

    def placement_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["t_start", "N_g", "N_a", "n_cp"])
            for r in self.intervals:
                w.writerow([f"{r.t_start:.6f}", f"{r.n_g:.9f}", f"{r.n_a:.9f}", r.n_cp])

    @property
    def mean_opt_ms(self):
        if not self.intervals:
            return 0.0
        return float(np.mean([r.solve_ms for r in self.intervals]))


def parse_mode(mode):
    """'non-uniform' -> None, 'uniform-N'/'uni-N' -> fixed count N."""
    m = mode.strip().lower()
    if m in ("non-uniform", "non-uni", "nonuniform"):
        return None
    for prefix in ("uniform-", "uni-"):
        if m.startswith(prefix):
            n = int(m[len(prefix):])
            if not 1 <= n <= 16:
                raise ValueError("uniform mode count must be in [1, 16]")
            return n
    raise ValueError(f"unknown mode {mode!r}")


class Odometry:
    """Tightly-coupled continuous-time odometry over a loaded bundle."""

    def __init__(self, bundle, cfg, use_lidar=True, use_camera=True, use_imu=True):
        self.bundle = bundle
        self.cfg = cfg
        self.use_lidar = use_lidar and cfg["use_lidar"]
        self.use_camera = use_camera and cfg["use_camera"]
        self.use_imu = use_imu and cfg["use_imu"]
        self.dt = cfg["dt"]
        self.fixed_count = parse_mode(cfg["mode"])
        self.gravity = GravityVector()
        self.policy = PlacementPolicy(cfg["placement.gyro_thresholds"],
                                      cfg["placement.accel_thresholds"],
                                      tuple(int(c) for c in cfg["placement.counts"]))
        self.settings = SolverSettings(
            max_iterations=cfg["solver.max_iterations"],
            initial_lambda=cfg["solver.initial_lambda"],
            lambda_up=cfg["solver.lambda_up"],
            lambda_down=cfg["solver.lambda_down"],
            cost_tolerance=cfg["solver.cost_tolerance"],
            step_tolerance=cfg["solver.step_tolerance"],
        )
        from .sim import camera_from_config, default_extrinsics
        self.extrinsics = default_extrinsics()
        self.camera = camera_from_config(cfg)
        self.vf_config = VisualFrontendConfig(
            gate_px=cfg["visual.gate_px"], admit_px=cfg["visual.admit_px"],
            grid_rows=cfg["visual.grid_rows"], grid_cols=cfg["visual.grid_cols"],
            ransac_iterations=cfg["visual.ransac_iterations"],
            ransac_threshold_px=cfg["visual.ransac_threshold_px"],
            ransac_min_pairs=cfg["visual.min_ransac_pairs"],
            max_depth=cfg["visual.max_depth"],
        )
        self.local_map = LocalMap(cfg["maps.keyscan_dt"], cfg["maps.keyscan_dist"],
                                  cfg["maps.keyscan_capacity"])
        self.voxel_map = GlobalVoxelMap(cfg["maps.voxel_resolution"],
                                        cfg["maps.voxel_cap"])
        self.tracked = TrackedPointSet()
        self._prev_pixels = {}
        self._init_state()

    # ------------------------------------------------------------- startup

    def _init_state(self):
        """Stationary start: biases from the static window, pose anchored."""
        imu = self.bundle.imu
        t_static = self.cfg["estimator.static_init_duration"]
        mask = imu["t"] < t_static
        if np.sum(mask) < 2:
            raise EstimatorError("not enough IMU data for static initialization")
        bg0 = imu["gyro"][mask].mean(axis=0)
        # a level stationary accelerometer reads (0, 0, +9.8)
        ba0 = imu["accel"][mask].mean(axis=0) - np.array([0.0, 0.0, 9.8])
        self.traj = Trajectory.initial(0.0, self.dt)
        self.window = WindowState(cp_indices=range(0, 3),
                                  bg_prev=bg0.copy(), ba_prev=ba0.copy(),
                                  bg_curr=bg0.copy(), ba_curr=ba0.copy())
        specs = []
        sigmas = []
        sp = self.cfg["estimator.anchor_sigma_pose"]
        for g in range(3):
            specs.append((f"rot_{g}", "so3", self.traj.rotation_cps[g]))
            sigmas.append(sp)
        for g in range(3):
            specs.append((f"pos_{g}", "vec", self.traj.position_cps[g]))
            sigmas.append(sp)
        specs.append(("bias_g", "vec", bg0))
        sigmas.append(self.cfg["estimator.anchor_sigma_bg"])
        specs.append(("bias_a", "vec", ba0))
        sigmas.append(self.cfg["estimator.anchor_sigma_ba"])
        self.prior = anchor_prior(specs, sigmas)
        self._prev_n_cp = 1
        self._calm_streak = 0
        self._scan_cursor = 0
        self._frame_cursor = 0
        self._misfit_history = []

    # -------------------------------------------------------------- pieces

    def _imu_slice(self, t_lo, t_hi):
        imu = self.bundle.imu
        m = (imu["t"] >= t_lo) & (imu["t"] < t_hi)
        return imu["t"][m], imu["gyro"][m], imu["accel"][m]

    def _decide_count(self, t_lo, ts, gyro, accel):
        if self.fixed_count is not None:
            return self.fixed_count, 0.0, 0.0
        if ts.size == 0:
            return self._prev_n_cp, 0.0, 0.0
        if self.traj.t_max - self.traj.t_min > 1e-9:
            R_start, _ = self.traj.eval_pose(min(t_lo, self.traj.t_max), closed=True)
        else:
            R_start = np.eye(3)
        stats = motion_stats(ts, gyro, accel, R_start, self.gravity,
                             gyro_bias=self.window.bg_prev,
                             accel_bias=self.window.ba_prev)
        n_cp = decide_count(stats, self.policy)
        # interval averages lag ramping motion; also gear on the last half
        if self.cfg["placement.use_half_window"] and ts.size >= 8:
            h = ts.size // 2
            half = motion_stats(ts[h:], gyro[h:], accel[h:], R_start, self.gravity,
                                gyro_bias=self.window.bg_prev,
                                accel_bias=self.window.ba_prev)
            n_cp = max(n_cp, decide_count(half, self.policy))
        if self.cfg["placement.damp_downshift"]:
            # downshifts re-lay the spline tail, so hold the gear until the
            # motion has stayed calm for several intervals, then drop once
            if n_cp < self._prev_n_cp:
                self._calm_streak += 1
                if self._calm_streak < 5:
                    n_cp = self._prev_n_cp
            else:
                self._calm_streak = 0
        return n_cp, stats.n_g, stats.n_a

    def _deskew(self, points, closed=False):
        """Sensor-frame stamped points (m,4) to world via the trajectory."""
        if points.shape[0] == 0:
            return np.zeros((0, 3))
        R, p = batch_eval_pose(self.traj, points[:, 0], closed=closed)
        body = points[:, 1:4] @ self.extrinsics.R_il.T + self.extrinsics.p_il
        return np.einsum("nij,nj->ni", R, body) + p

    def _lidar_factors(self, scan_points):
        """Associate deskewed points against local-map planes."""
        cfg = self.cfg
        max_n = cfg["estimator.max_lidar_factors"]
        if scan_points.shape[0] > max_n:
            idx = np.linspace(0, scan_points.shape[0] - 1, max_n).astype(int)
            scan_points = scan_points[idx]
        k = cfg["estimator.knn"]
        if len(self.local_map) < k:
            return []
        world_pts = self._deskew(scan_points)
        neighbors = self.local_map.knn_batch(world_pts, k)
        if neighbors is None:
            return []
        factors = []
        tol = cfg["maps.plane_tolerance"]
        gate = cfg["estimator.residual_gate"]
        max_dist = cfg["estimator.max_assoc_dist"]
        for row, w_pt, nbrs in zip(scan_points, world_pts, neighbors):
            # reject queries at the map coverage edge: nearest neighbor must
            # be close, and the whole patch within the association radius
            if np.linalg.norm(nbrs[0] - w_pt) > 0.5 * max_dist:
                continue
            if np.linalg.norm(nbrs[-1] - w_pt) > max_dist:
                continue
            plane = fit_plane(nbrs, tolerance=tol, min_spread=0.3 * cfg["maps.voxel_resolution"])
            if plane is None:
                continue
            r0 = plane.normal @ w_pt + plane.d
            if abs(r0) > gate:
                continue
            factors.append(LidarPlanarFactor(row[1:4].copy(), float(row[0]),
                                             plane.normal, plane.d,
                                             _sigma(cfg["noise.sigma_lidar"])))
        return factors

    def _visual_factors(self, frame, interval_index):
        R, p = self.traj.eval_pose(frame.t)
        rng = np.random.default_rng((self.cfg["seed"], 7, interval_index))
        factors, stats = associate_frame(
            self.tracked, self.voxel_map, frame, (R, p), self.camera,
            config=self.vf_config, rng=rng, prev_pixels=self._prev_pixels)
        for f in factors:
            f.sigma = _sigma(self.cfg["noise.sigma_pixel"])
            f.cauchy_scale = self.cfg["noise.cauchy_scale"]
        self._prev_pixels = {int(i): pix for i, pix in zip(frame.ids, frame.pixels)}
        return factors, stats

    # ------------------------------------------------------- tail rebasing

    def _rebase_tail(self, n_knots_before, tail_before, shared_cps):
        """Re-express the shared control points after a tail re-lay.

        Appending an interval whose sub-spacing differs from the previous
        one replaces the extrapolated tail knots, which redefines the last
        two segment matrices. The marginalized prior was built under the
        old geometry, so the trailing shared control points are refit so
        the spline reproduces the pre-extension tail poses, and the prior's
        linearization points move with them (information unchanged, a
        first-order rebasing).
        """
        kv = self.traj.knot_vector
        if tail_before is None:
            return
        if (abs(kv.knot(n_knots_before) - tail_before[1][0]) < 1e-12
                and abs(kv.knot(n_knots_before + 1) - tail_before[1][1]) < 1e-12):
            return  # same spacing: matrices unchanged
        t_samples, targets, J_old = tail_before[0], tail_before[2], tail_before[3]
        nc = len(shared_cps)
        J = None
        for _ in range(3):
            J, r = self._tail_jacobian(t_samples, targets, shared_cps)
            if np.linalg.norm(r) < 1e-12:
                break
            delta, *_ = np.linalg.lstsq(J, -r, rcond=None)
            for c, g in enumerate(shared_cps):
                q = so3.quat_multiply(self.traj.rotation_cps[g],
                                      so3.quat_exp(delta[3 * c:3 * c + 3]))
                self.traj.rotation_cps[g] = so3.quat_normalize(q)
                off = 3 * nc + 3 * c
                self.traj.position_cps[g] = self.traj.position_cps[g] + delta[off:off + 3]
        self._last_rebase_residual = float(np.linalg.norm(r))
        self._transform_prior(J, J_old, shared_cps)
    def _tail_jacobian(self, t_samples, targets, shared_cps, w_vel=0.05):
        """Stacked pose/velocity residuals and Jacobian w.r.t. shared CPs."""
        from .kernels import kernel_for_segment
        kv = self.traj.knot_vector
        nc = len(shared_cps)
        rows_J, rows_r = [], []
        for t, (R_t, p_t, v_t) in zip(t_samples, targets):
            i = kv.segment_of(float(t))
            k = kernel_for_segment(self.traj, i, [t])
            e_r = so3.so3_log(R_t.T @ k.R[0])
            e_p = k.p[0] - p_t
            e_v = w_vel * (k.v[0] - v_t)
            Jrow = np.zeros((9, 6 * nc))
            Jrinv = so3.right_jacobian_inv(e_r)
            for s in range(4):
                g = i - 3 + s
                if g not in shared_cps:
                    continue
                c = shared_cps.index(g)
                xi = np.zeros((3, 3))
                for a, K in k.terms[s]:
                    xi += np.transpose(k.Rbar[a][0]) @ K[0]
                Jrow[:3, 3 * c:3 * c + 3] = Jrinv @ xi
                Jrow[3:6, 3 * nc + 3 * c:3 * nc + 3 * c + 3] = \
                    k.pos_coeffs[0, s] * np.eye(3)
                Jrow[6:9, 3 * nc + 3 * c:3 * nc + 3 * c + 3] = \
                    w_vel * k.vel_coeffs[0, s] * np.eye(3)
            rows_J.append(Jrow)
            rows_r.append(np.concatenate([e_r, e_p, e_v]))
        return np.vstack(rows_J), np.concatenate(rows_r)

    def _transform_prior(self, J_new, J_old, shared_cps):
        """Conjugate the prior by the rebase map and move its linearization.

        The rebase defines, to first order, delta_new = T delta_old with
        T = pinv(J_new) J_old (both Jacobians map CP tangents to the same
        tail pose perturbations), so the prior information transforms as
        H <- T^-T H T^-1 over the control point block.
        """
        prior = self.prior
        dim = prior.information_matrix.shape[0]
        ncp_dim = 6 * len(shared_cps)
        T = np.eye(dim)
        if J_new is not None and J_old is not None and ncp_dim <= dim:
            T_cp, *_ = np.linalg.lstsq(J_new, J_old, rcond=None)
            # guard against ill-conditioned fits far from identity
            if np.all(np.isfinite(T_cp)) and np.linalg.norm(T_cp - np.eye(ncp_dim)) < 2.0:
                T[:ncp_dim, :ncp_dim] = T_cp
        Ti = np.linalg.inv(T)
        H_new = Ti.T @ prior.information_matrix @ Ti
        b_new = Ti.T @ prior.information_vector
        # re-anchor the linearization at the rebased control point values
        from .solver import PriorBlockSpec, PriorFactor
        specs = []
        for spec in prior.block_specs:
            lin = spec.linearization
            if spec.name.startswith("rot_"):
                g = int(spec.name[4:])
                if g in shared_cps:
                    lin = self.traj.rotation_cps[g].copy()
            elif spec.name.startswith("pos_"):
                g = int(spec.name[4:])
                if g in shared_cps:
                    lin = self.traj.position_cps[g].copy()
            specs.append(PriorBlockSpec(spec.name, spec.kind, lin))
        self.prior = PriorFactor(specs, H_new, b_new,
                                 regularized=prior.regularized)

    def _tail_snapshot(self):
        """Sample the trajectory tail that an extension may redefine."""
        kv = self.traj.knot_vector
        n = len(kv)
        if self.traj.t_max - self.traj.t_min < 1e-9:
            return None
        lo = max(kv.knot(n - 3), self.traj.t_min)
        hi = self.traj.t_max
        ts = np.linspace(lo, hi - 1e-9, 12)
        virtual = (kv.knot(n), kv.knot(n + 1))
        targets = []
        for t in ts:
            s = self.traj.eval_derivatives(float(t))
            targets.append((s.rotation, s.position, s.linear_velocity_world))
        n_cps = self.traj.n_control_points
        shared = [g for g in range(n_cps - 3, n_cps) if g >= 0]
        J_old, _ = self._tail_jacobian(ts, targets, shared)
        return ts, virtual, targets, J_old

    # ------------------------------------------------------------ interval

    def _snapshot(self):
        return {
            "knots": self.traj.knot_vector.knots.copy(),
            "rot": self.traj.rotation_cps.copy(),
            "pos": self.traj.position_cps.copy(),
            "prior": self.prior,
            "prior_lins": [s.linearization.copy() for s in self.prior.block_specs],
            "window": (self.window.bg_prev.copy(), self.window.ba_prev.copy(),
                       self.window.bg_curr.copy(), self.window.ba_curr.copy()),
            "scan_cursor": self._scan_cursor,
            "frame_cursor": self._frame_cursor,
            "tracked": dict(self.tracked.entries),
            "prev_pixels": dict(self._prev_pixels),
            "prev_n_cp": self._prev_n_cp,
            "calm_streak": self._calm_streak,
        }

    def _restore(self, snap):
        from .spline import KnotVector
        self.traj.knot_vector = KnotVector(snap["knots"])
        self.traj.rotation_cps = snap["rot"]
        self.traj.position_cps = snap["pos"]
        self.traj._seg_cache.clear()
        self.prior = snap["prior"]
        for spec, lin in zip(self.prior.block_specs, snap["prior_lins"]):
            spec.linearization = lin
        bg_prev, ba_prev, bg_curr, ba_curr = snap["window"]
        self.window = WindowState(self.window.cp_indices, bg_prev, ba_prev,
                                  bg_curr, ba_curr)
        self._scan_cursor = snap["scan_cursor"]
        self._frame_cursor = snap["frame_cursor"]
        self.tracked.entries = snap["tracked"]
        self._prev_pixels = snap["prev_pixels"]
        self._prev_n_cp = snap["prev_n_cp"]
        self._calm_streak = snap["calm_streak"]

    def _attempt_interval(self, kappa, t_lo, t_hi, ts, gyro, accel, n_cp):
        """Append, bootstrap, associate, solve and marginalize one interval."""
        cfg = self.cfg
        self._prev_n_cp = n_cp
        n_knots_before = len(self.traj.knot_vector)
        n_cps_before = self.traj.n_control_points
        tail_before = self._tail_snapshot()
        append_and_initialize(self.traj, n_cp, t_lo, t_hi)
        shared = [g for g in range(n_cps_before - 3, n_cps_before) if g >= 0]
        self._rebase_tail(n_knots_before, tail_before, shared)
        n_total = self.traj.n_control_points
        window = WindowState(range(n_total - n_cp - 3, n_total),
                             self.window.bg_curr.copy(), self.window.ba_curr.copy(),
                             self.window.bg_curr.copy(), self.window.ba_curr.copy())

        imu_factors = []
        if self.use_imu:
            sg = _sigma(cfg["noise.sigma_gyro"])
            sa = _sigma(cfg["noise.sigma_accel"])
            imu_factors = [ImuFactor(float(t), g, a, sg, sa)
                           for t, g, a in zip(ts, gyro, accel)]

        t_solve0 = time.perf_counter()
        if imu_factors:
            bootstrap_optimize(self.traj, window, imu_factors, self.prior,
                               self.gravity, self.extrinsics, self.settings)

        lidar_factors = []
        scan = None
        if self.use_lidar:
            while (self._scan_cursor < len(self.bundle.scans)
                   and self.bundle.scans[self._scan_cursor][0] < t_lo - 1e-9):
                self._scan_cursor += 1
            if (self._scan_cursor < len(self.bundle.scans)
                    and t_lo - 1e-9 <= self.bundle.scans[self._scan_cursor][0] < t_hi):
                scan = self.bundle.scans[self._scan_cursor]
                self._scan_cursor += 1
                lidar_factors = self._lidar_factors(scan[1])

        visual_factors = []
        if self.use_camera:
            latest = None
            while (self._frame_cursor < len(self.bundle.frames)
                   and self.bundle.frames[self._frame_cursor].t < t_hi - 1e-9):
                if self.bundle.frames[self._frame_cursor].t >= t_lo - 1e-9:
                    latest = self.bundle.frames[self._frame_cursor]
                self._frame_cursor += 1
            if latest is not None and len(self.voxel_map.voxels) > 0:
                visual_factors, _ = self._visual_factors(latest, kappa)

        bias_factor = BiasFactor(_sigma(cfg["noise.sigma_bg_walk"], 1e-7),
                                 _sigma(cfg["noise.sigma_ba_walk"], 1e-7))
        problem, layout, groups = build_window_problem(
            self.traj, window, self.gravity.g_world, self.extrinsics,
            imu_factors=imu_factors, lidar_factors=lidar_factors,
            reproj_factors=visual_factors, bias_factor=bias_factor,
            prior=self.prior, optimize_bias=True)

        flagged = False
        iters = 0
        final_cost = np.nan
        try:
            res = solve_lm(problem, settings=self.settings)
            write_back(self.traj, window, layout, res.values)
            iters = res.iterations
            final_cost = res.cost
            if logger.isEnabledFor(logging.DEBUG):
                H, _, _ = problem.assemble(res.values)
                logger.debug("interval %.2f condition number %.3e",
                             t_lo, np.linalg.cond(H))
            self.prior = marginalize_window(problem, layout, res.values, window)
        except SolverError as exc:
            logger.warning("interval %.2f solver failure: %s", t_lo, exc)
            flagged = True
            specs, sigmas = [], []
            for g in list(window.cp_indices)[-3:]:
                specs.append((f"rot_{g}", "so3", self.traj.rotation_cps[g]))
                sigmas.append(1e-2)
                specs.append((f"pos_{g}", "vec", self.traj.position_cps[g]))
                sigmas.append(1e-2)
            specs.append(("bias_g", "vec", window.bg_curr))
            sigmas.append(1e-3)
            specs.append(("bias_a", "vec", window.ba_curr))
            sigmas.append(1e-2)
            self.prior = anchor_prior(specs, sigmas)
        solve_ms = (time.perf_counter() - t_solve0) * 1e3
        self.window = window

        n_rows = 6 * len(imu_factors) + len(lidar_factors) + 2 * len(visual_factors) + 6
        cost_per_row = final_cost / max(n_rows, 1)
        return {
            "scan": scan, "n_lidar": len(lidar_factors),
            "n_visual": len(visual_factors), "n_imu": len(imu_factors),
            "iters": iters, "final_cost": final_cost, "solve_ms": solve_ms,
            "flagged": flagged, "cost_per_row": cost_per_row,
        }

    def process_interval(self, kappa):
        """One full interval: placement, bootstrap, fusion, marginalization,
        map updates, in that order. Returns an IntervalLog.

        An interval whose converged fit is far worse than the recent norm
        while under-provisioned is retried once at the top gear; this keeps
        fast motion ramps from committing a poorly fit window.
        """
        cfg = self.cfg
        # boundaries computed identically everywhere so knots and data masks
        # tile the timeline without float cracks
        t_lo = kappa * self.dt
        t_hi = (kappa + 1) * self.dt
        ts, gyro, accel = self._imu_slice(t_lo, t_hi)
        n_cp, n_g, n_a = self._decide_count(t_lo, ts, gyro, accel)

        max_count = max(self.policy.counts)
        retry_factor = cfg["placement.retry_misfit"]
        snap = None
        if self.fixed_count is None and n_cp < max_count and retry_factor > 0:
            snap = self._snapshot()
        out = self._attempt_interval(kappa, t_lo, t_hi, ts, gyro, accel, n_cp)
        if snap is not None and np.isfinite(out["cost_per_row"]):
            threshold = max(retry_factor * self._misfit_median(), 3.0)
            if out["cost_per_row"] > threshold:
                self._restore(snap)
                n_cp = max_count
                self._prev_n_cp = n_cp
                out = self._attempt_interval(kappa, t_lo, t_hi, ts, gyro, accel, n_cp)
        if np.isfinite(out["cost_per_row"]):
            self._misfit_history.append(out["cost_per_row"])
            if len(self._misfit_history) > 20:
                self._misfit_history.pop(0)

        # map updates with the optimized trajectory; the local map stores
        # voxel-averaged points so plane fits see decorrelated geometry
        scan = out["scan"]
        if scan is not None and scan[1].shape[0] > 0:
            pts_world = self._deskew(scan[1], closed=True)
            _, p_sensor = self.traj.eval_pose(scan[0], closed=True)
            down = voxel_downsample(pts_world, cfg["maps.voxel_resolution"])
            self.local_map.insert_scan(down, p_sensor, scan[0])
            self.voxel_map.insert(pts_world)

        return IntervalLog(t_lo, n_cp, out["n_lidar"], out["n_visual"],
                           out["n_imu"], out["iters"], out["final_cost"],
                           out["solve_ms"], n_g, n_a, out["flagged"])

    def _misfit_median(self):
        if not self._misfit_history:
            return 1.0
        return float(np.median(self._misfit_history))

    def run(self, duration=None):
        duration = duration if duration is not None else self.bundle.duration
        n_intervals = int(round(duration / self.dt))
        result = RunResult(self.traj)
        for kappa in range(n_intervals):
            log = self.process_interval(kappa)
            result.intervals.append(log)
            if log.flagged:
                result.n_failed += 1
        result.trajectory = self.traj
        return result
