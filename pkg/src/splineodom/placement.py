"""Adaptive control-point placement from per-interval IMU statistics.

Each extension interval gets a control point count decided from the norms
of the averaged world-frame angular rate and gravity-compensated
acceleration over the interval's raw IMU samples: both are mapped through
an ascending breakpoint table ("gears") and the larger count wins. The new
control points subdivide the interval uniformly and start from the last
optimized control point value, then an IMU-only bootstrap optimization
shapes them before LiDAR/camera fusion.

Placement is deterministic and pure; bootstrap_optimize mutates the
trajectory under exclusive access.
"""

import bisect
import logging
from dataclasses import dataclass, field

import numpy as np

from . import so3
from .solver import SolverError, SolverSettings, solve_lm
from .window import build_window_problem, write_back

logger = logging.getLogger(__name__)


@dataclass
class GravityVector:
    """World-frame gravity; a stationary level accelerometer reads -g_world."""

    g_world: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.8]))

    def __post_init__(self):
        self.g_world = np.asarray(self.g_world, dtype=float)
        if abs(np.linalg.norm(self.g_world) - 9.8) > 1e-6:
            raise ValueError("gravity magnitude must be 9.8 m/s^2")


@dataclass
class MotionStats:
    n_g: float   # rad/s
    n_a: float   # m/s^2
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one IMU sample")


@dataclass
class PlacementPolicy:
    """Gear table: count index = number of breakpoints at or below the stat."""

    gyro_thresholds: tuple = (0.3, 0.7, 1.4)
    accel_thresholds: tuple = (0.8, 1.8, 3.6)
    counts: tuple = (1, 2, 3, 4)

    def __post_init__(self):
        if len(self.gyro_thresholds) != len(self.accel_thresholds):
            raise ValueError("threshold lists must have equal length")
        if len(self.counts) != len(self.gyro_thresholds) + 1:
            raise ValueError("need one count per gear")
        if list(self.gyro_thresholds) != sorted(self.gyro_thresholds):
            raise ValueError("thresholds must ascend")
        if list(self.accel_thresholds) != sorted(self.accel_thresholds):
            raise ValueError("thresholds must ascend")
        counts = list(self.counts)
        if counts != sorted(counts) or counts[0] < 1 or counts[-1] > 8:
            raise ValueError("counts must be non-decreasing, in [1, 8]")


def integrate_gyro(ts, gyro, R_start, gyro_bias=None):
    """Per-sample rotations by midpoint-rule integration of raw gyro data."""
    gyro_bias = np.zeros(3) if gyro_bias is None else gyro_bias
    w = gyro - gyro_bias
    Rs = np.empty((len(ts), 3, 3))
    Rs[0] = R_start
    for i in range(len(ts) - 1):
        dt = ts[i + 1] - ts[i]
        Rs[i + 1] = Rs[i] @ so3.so3_exp(0.5 * (w[i] + w[i + 1]) * dt)
    return Rs


def motion_stats(ts, gyro, accel, R_start, gravity, gyro_bias=None, accel_bias=None):
    """Norms of averaged world-frame angular rate and net acceleration.

    ts/gyro/accel are the interval's raw IMU samples (parallel arrays);
    rotations are integrated forward from R_start with the current gyro
    bias. The accelerometer convention is specific force f = R^T (a - g),
    so the net world acceleration of sample i is R_i f_i + g_world.
    """
    ts = np.asarray(ts, dtype=float)
    if ts.size == 0:
        raise ValueError("empty IMU window")
    gyro = np.asarray(gyro, dtype=float).reshape(-1, 3)
    accel = np.asarray(accel, dtype=float).reshape(-1, 3)
    gyro_bias = np.zeros(3) if gyro_bias is None else gyro_bias
    accel_bias = np.zeros(3) if accel_bias is None else accel_bias
    Rs = integrate_gyro(ts, gyro, R_start, gyro_bias)
    w_world = np.einsum("nij,nj->ni", Rs, gyro - gyro_bias)
    a_world = np.einsum("nij,nj->ni", Rs, accel - accel_bias) + gravity.g_world
    n = ts.size
    return MotionStats(
        n_g=float(np.linalg.norm(w_world.sum(axis=0))) / n,
        n_a=float(np.linalg.norm(a_world.sum(axis=0))) / n,
        n=n,
    )


def decide_count(stats, policy):
    """max of the gyro and accel gear counts; breakpoints close from below."""
    gear_g = bisect.bisect_right([-np.inf] + list(policy.gyro_thresholds), stats.n_g) - 1
    gear_a = bisect.bisect_right([-np.inf] + list(policy.accel_thresholds), stats.n_a) - 1
    return max(policy.counts[gear_g], policy.counts[gear_a])


def append_and_initialize(traj, n_cp, t_start, t_end):
    """Append n_cp knots uniformly subdividing [t_start, t_end).

    Every new control point starts from the latest optimized control point
    value. The interval must abut the trajectory end.
    """
    if n_cp < 1:
        raise ValueError("n_cp must be at least 1")
    if abs(t_start - traj.t_max) > 1e-9:
        raise ValueError(f"interval start {t_start} does not abut trajectory end {traj.t_max}")
    new_knots = t_start + (t_end - t_start) * np.arange(1, n_cp + 1) / n_cp
    new_knots[-1] = t_end  # keep the interval boundary bit-exact
    q_last = traj.rotation_cps[-1]
    p_last = traj.position_cps[-1]
    traj.extend(new_knots, np.tile(q_last, (n_cp, 1)), np.tile(p_last, (n_cp, 1)))
    return traj


def bootstrap_optimize(traj, window, imu_factors, prior, gravity, extrinsics,
                       settings=None):
    """IMU-only shaping of the freshly appended control points.

    Solves the window with IMU factors and the prior only, biases held at
    their current estimates. On solver failure the initialization is kept
    and the interval flagged.
    """
    settings = settings or SolverSettings()
    problem, layout, _ = build_window_problem(
        traj, window, gravity.g_world, extrinsics,
        imu_factors=imu_factors, prior=prior, optimize_bias=False,
    )
    try:
        res = solve_lm(problem, settings=settings)
    except SolverError as exc:
        logger.warning("bootstrap solver failed (%s); keeping initialization", exc)
        return {"flagged": True, "iterations": 0, "cost": np.nan}
    write_back(traj, window, layout, res.values, optimize_bias=False)
    return {"flagged": False, "iterations": res.iterations, "cost": res.cost,
            "initial_cost": res.initial_cost}
