"""Deterministic synthetic world and sensor rig.

Ground truth is an analytic sum of enveloped sinusoids in position and in
the rotation vector, so every derivative is closed form and the truth is
not itself a cubic spline (the estimator has to approximate it). Three
motion regimes are generated: smooth (stays below the lowest placement
breakpoints), violent (peak rates beyond the top breakpoints), and hybrid
(smooth-violent-smooth with C2 envelope blending). Every run starts with a
stationary hold so the estimator can initialize biases.

Sensors follow the measurement models of the estimator exactly: the
gyroscope reads body angular rate plus bias and noise, the accelerometer
reads specific force R^T (a - g) plus bias and noise, the LiDAR sweeps
azimuth across each scan period with per-point timestamps (so fast motion
produces real skew), and the camera reports (landmark id, pixel)
correspondences with Gaussian noise and seeded, internally labeled
outliers. All randomness flows from one seed; identical configurations
produce bit-identical bundles.
"""

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .camera import CameraFrame, CameraModel
from .factors import ExtrinsicSet

GRAVITY_WORLD = np.array([0.0, 0.0, -9.8])

# camera optical axis along body +x, image x right (-y body), image y down (-z body)
R_IMU_CAMERA = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])


def default_extrinsics():
    T_il = np.eye(4)
    T_ic = np.eye(4)
    T_ic[:3, :3] = R_IMU_CAMERA
    T_ic[:3, 3] = np.array([0.05, 0.0, 0.02])
    return ExtrinsicSet(T_il, T_ic)


def _smoothstep(x):
    """Quintic smoothstep with zero first and second derivatives at 0 and 1."""
    x = np.clip(x, 0.0, 1.0)
    s = x ** 3 * (10.0 - 15.0 * x + 6.0 * x * x)
    ds = 30.0 * x ** 2 - 60.0 * x ** 3 + 30.0 * x ** 4
    dds = 60.0 * x - 180.0 * x ** 2 + 120.0 * x ** 3
    return s, ds, dds


class Envelope:
    """C2 window: 0, rise over [t_on, t_on+rise], 1, fall over [t_off, t_off+fall], 0."""

    def __init__(self, t_on=0.0, rise=0.0, t_off=None, fall=0.0):
        self.t_on = t_on
        self.rise = rise
        self.t_off = t_off
        self.fall = fall

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        e = np.ones_like(t)
        de = np.zeros_like(t)
        dde = np.zeros_like(t)
        if self.rise > 0.0:
            x = (t - self.t_on) / self.rise
            s, ds, dds = _smoothstep(x)
            e, de, dde = s, ds / self.rise, dds / self.rise ** 2
        else:
            e = (t >= self.t_on).astype(float)
        if self.t_off is not None:
            if self.fall > 0.0:
                x = (t - self.t_off) / self.fall
                s, ds, dds = _smoothstep(x)
                e2, de2, dde2 = 1.0 - s, -ds / self.fall, -dds / self.fall ** 2
            else:
                e2 = (t < self.t_off).astype(float)
                de2 = dde2 = np.zeros_like(t)
            # product of the rising and falling windows (supports disjoint ramps)
            e, de, dde = (e * e2, de * e2 + e * de2,
                          dde * e2 + 2.0 * de * de2 + e * dde2)
        return e, de, dde


@dataclass
class SinusoidComponent:
    amplitude: np.ndarray   # (3,) per axis
    freq_hz: np.ndarray     # (3,)
    phase: np.ndarray       # (3,)
    envelope: Envelope

    def evaluate(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        w = 2.0 * np.pi * self.freq_hz
        arg = w * t + self.phase
        g = self.amplitude * np.sin(arg)
        dg = self.amplitude * w * np.cos(arg)
        ddg = -self.amplitude * w * w * np.sin(arg)
        e, de, dde = self.envelope(np.asarray(t)[..., 0])
        e, de, dde = e[..., None], de[..., None], dde[..., None]
        val = e * g
        d1 = de * g + e * dg
        d2 = dde * g + 2.0 * de * dg + e * ddg
        return val, d1, d2


class SyntheticTrajectory:
    """Analytic ground truth: position and rotation-vector sinusoid sums."""

    def __init__(self, pos_components, rot_components, duration):
        self.pos_components = pos_components
        self.rot_components = rot_components
        self.duration = duration

    def _sum(self, components, t):
        val = np.zeros((np.size(t), 3))
        d1 = np.zeros_like(val)
        d2 = np.zeros_like(val)
        for c in components:
            v, a, b = c.evaluate(np.atleast_1d(t))
            val += v
            d1 += a
            d2 += b
        return val, d1, d2

    def position(self, t):
        return self._sum(self.pos_components, t)

    def rotation_vector(self, t):
        return self._sum(self.rot_components, t)

    def state(self, t):
        """Pose and derivatives at scalar t: (R, p, omega_body, v, a)."""
        p, v, a = self.position(t)
        th, dth, _ = self.rotation_vector(t)
        R = so3.so3_exp(th[0])
        omega = so3.right_jacobian(th[0]) @ dth[0]
        return R, p[0], omega, v[0], a[0]

    def states(self, ts):
        """Batched states over a time array: dict of (n,...) arrays."""
        ts = np.asarray(ts, dtype=float)
        p, v, a = self.position(ts)
        th, dth, _ = self.rotation_vector(ts)
        n = ts.size
        R = np.empty((n, 3, 3))
        omega = np.empty((n, 3))
        for i in range(n):
            R[i] = so3.so3_exp(th[i])
            omega[i] = so3.right_jacobian(th[i]) @ dth[i]
        return {"t": ts, "R": R, "p": p, "omega": omega, "v": v, "a": a}

    def pose(self, t):
        p, _, _ = self.position(t)
        th, _, _ = self.rotation_vector(t)
        return so3.so3_exp(th[0]), p[0]

    def tum_text(self, rate_hz=100.0):
        lines = []
        n = int(np.floor(self.duration * rate_hz))
        for j in range(n):
            t = j / rate_hz
            R, p = self.pose(t)
            q = so3.matrix_to_quat(R)
            lines.append(
                f"{t:.6f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class MotionProfile:
    regime: str = "smooth"
    duration: float = 30.0
    seed: int = 0
    start_hold: float = 1.0
    start_ramp: float = 2.0


def _jitter(rng, base, rel=0.1):
    return base * rng.uniform(1.0 - rel, 1.0 + rel, size=np.shape(base))


def _component(rng, amp, freq, envelope):
    return SinusoidComponent(
        amplitude=np.asarray(_jitter(rng, amp), dtype=float),
        freq_hz=np.asarray(_jitter(rng, freq), dtype=float),
        phase=rng.uniform(0.0, 2.0 * np.pi, size=3),
        envelope=envelope,
    )


def gen_trajectory(profile):
    """Ground-truth trajectory for a motion regime; same seed, same output."""
    rng = np.random.default_rng(profile.seed)
    base_env = Envelope(profile.start_hold, profile.start_ramp)
    # the large slow-wander component ramps in gently so the startup stays
    # inside the smooth-regime acceleration bound
    slow_env = Envelope(profile.start_hold, max(4.0 * profile.start_ramp, 6.0))
    T = profile.duration

    smooth_pos = [
        ([0.20, 0.20, 0.10], [0.15, 0.12, 0.10]),
        ([0.06, 0.06, 0.04], [0.25, 0.22, 0.20]),
    ]
    wander_pos = [
        ([1.50, 1.20, 0.30], [0.03, 0.025, 0.02]),
    ]
    smooth_rot = [
        ([0.10, 0.08, 0.12], [0.15, 0.12, 0.18]),
        ([0.035, 0.03, 0.04], [0.28, 0.26, 0.24]),
    ]
    violent_pos = [
        ([0.035, 0.030, 0.025], [2.7, 2.4, 2.9]),
        ([0.10, 0.08, 0.06], [1.1, 0.9, 1.2]),
    ]
    violent_rot = [
        ([0.35, 0.30, 0.32], [3.2, 2.9, 3.4]),
        ([0.15, 0.12, 0.13], [5.1, 4.7, 5.4]),
    ]

    if profile.regime == "smooth":
        envs = {"smooth": base_env, "violent": None}
    elif profile.regime == "violent":
        envs = {"smooth": base_env, "violent": base_env}
    elif profile.regime == "hybrid":
        mid = Envelope(0.35 * T, 3.0, 0.62 * T, 3.0)
        envs = {"smooth": base_env, "violent": mid}
    else:
        raise ValueError(f"unknown regime {profile.regime!r}")

    pos_components = [_component(rng, a, f, envs["smooth"]) for a, f in smooth_pos]
    pos_components += [_component(rng, a, f, slow_env) for a, f in wander_pos]
    rot_components = [_component(rng, a, f, envs["smooth"]) for a, f in smooth_rot]
    if envs["violent"] is not None:
        pos_components += [_component(rng, a, f, envs["violent"]) for a, f in violent_pos]
        rot_components += [_component(rng, a, f, envs["violent"]) for a, f in violent_rot]
    return SyntheticTrajectory(pos_components, rot_components, T)


# ------------------------------------------------------------------- world

@dataclass
class Rectangle:
    corner: np.ndarray
    e1: np.ndarray
    e2: np.ndarray

    def __post_init__(self):
        self.corner = np.asarray(self.corner, dtype=float)
        self.e1 = np.asarray(self.e1, dtype=float)
        self.e2 = np.asarray(self.e2, dtype=float)
        n = np.cross(self.e1, self.e2)
        self.normal = n / np.linalg.norm(n)
        self.d = float(-self.normal @ self.corner)
        self.len1 = np.linalg.norm(self.e1)
        self.len2 = np.linalg.norm(self.e2)
        self.u1 = self.e1 / self.len1
        self.u2 = self.e2 / self.len2


@dataclass
class PlaneWorld:
    planes: list = field(default_factory=list)

    def ray_intersect(self, origin, dirs, t_min=0.1, t_max=30.0, only_plane=None):
        """Nearest bounded-rectangle hit per ray: (ranges, plane idx, mask)."""
        dirs = np.atleast_2d(dirs)
        n_rays = dirs.shape[0]
        best = np.full(n_rays, np.inf)
        hit = np.full(n_rays, -1, dtype=int)
        planes = (self.planes if only_plane is None
                  else [self.planes[only_plane]])
        idx_map = (range(len(self.planes)) if only_plane is None else [only_plane])
        origin = np.asarray(origin, dtype=float)
        for pi, rect in zip(idx_map, planes):
            denom = dirs @ rect.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                s = -(origin @ rect.normal + rect.d) / denom
            valid = np.isfinite(s) & (s > t_min) & (s < t_max)
            s = np.where(valid, s, 0.0)
            q = origin + s[:, None] * dirs
            rel = q - rect.corner
            a = rel @ rect.u1
            b = rel @ rect.u2
            valid &= (a >= 0.0) & (a <= rect.len1) & (b >= 0.0) & (b <= rect.len2)
            better = valid & (s < best)
            best[better] = s[better]
            hit[better] = pi
        mask = hit >= 0
        return best, hit, mask

    def sample_landmarks(self, n, rng):
        """World points on the plane surfaces, area-weighted and seeded."""
        areas = np.array([r.len1 * r.len2 for r in self.planes])
        probs = areas / areas.sum()
        counts = rng.multinomial(n, probs)
        pts = []
        for rect, c in zip(self.planes, counts):
            u = rng.uniform(0.05, 0.95, size=c)
            v = rng.uniform(0.05, 0.95, size=c)
            pts.append(rect.corner + u[:, None] * rect.e1 + v[:, None] * rect.e2)
        return np.concatenate(pts) if pts else np.zeros((0, 3))


def default_world():
    """Box room with two interior panels; at least three plane orientations."""
    x0, x1 = -8.0, 8.0
    y0, y1 = -6.0, 6.0
    z0, z1 = -1.6, 3.4
    dx, dy, dz = x1 - x0, y1 - y0, z1 - z0
    ex = np.array([dx, 0, 0])
    ey = np.array([0, dy, 0])
    ez = np.array([0, 0, dz])
    planes = [
        Rectangle([x0, y0, z0], ex, ey),                 # floor
        Rectangle([x0, y0, z1], ex, ey),                 # ceiling
        Rectangle([x0, y0, z0], ey, ez),                 # wall x = x0
        Rectangle([x1, y0, z0], ey, ez),                 # wall x = x1
        Rectangle([x0, y0, z0], ex, ez),                 # wall y = y0
        Rectangle([x0, y1, z0], ex, ez),                 # wall y = y1
        Rectangle([4.0, -2.0, -1.0], [0, 4.0, 0], [0, 0, 3.0]),   # panel x = 4
        Rectangle([-3.0, 3.5, -1.0], [5.0, 0, 0], [0, 0, 3.0]),   # panel y = 3.5
    ]
    return PlaneWorld(planes)


# ----------------------------------------------------------------- sensors

def gen_imu(gt, duration, rate_hz, sigma_g, sigma_a, walk_g, walk_a, seed,
            initial_bias_g=None, initial_bias_a=None, gravity=GRAVITY_WORLD):
    """IMU stream (t, gyro, accel, bias histories) with seeded bias walks.

    walk_g/walk_a are per-sqrt-second densities; zero noise and walk give
    exact measurements.
    """
    rng = np.random.default_rng(seed)
    n = int(np.floor(duration * rate_hz))
    ts = np.arange(n) / rate_hz
    dt = 1.0 / rate_hz
    bg0 = np.zeros(3) if initial_bias_g is None else np.asarray(initial_bias_g, float)
    ba0 = np.zeros(3) if initial_bias_a is None else np.asarray(initial_bias_a, float)
    st = gt.states(ts)
    f = np.einsum("nji,nj->ni", st["R"], st["a"] - gravity)
    sq = np.sqrt(dt)
    steps_g = walk_g * sq * rng.normal(size=(n, 3))
    steps_a = walk_a * sq * rng.normal(size=(n, 3))
    bgs = bg0 + np.vstack([np.zeros(3), np.cumsum(steps_g[:-1], axis=0)])
    bas = ba0 + np.vstack([np.zeros(3), np.cumsum(steps_a[:-1], axis=0)])
    gyro = st["omega"] + bgs + sigma_g * rng.normal(size=(n, 3))
    accel = f + bas + sigma_a * rng.normal(size=(n, 3))
    return {"t": ts, "gyro": gyro, "accel": accel, "bias_g": bgs, "bias_a": bas}


def lidar_ray_directions(rings, azimuth_steps):
    """Unit ray directions (azimuth-major) of a spinning multi-ring LiDAR."""
    elev = np.deg2rad(np.linspace(-15.0, 15.0, rings))
    az = np.linspace(0.0, 2.0 * np.pi, azimuth_steps, endpoint=False)
    ce, se = np.cos(elev), np.sin(elev)
    dirs = np.empty((azimuth_steps, rings, 3))
    for i, a in enumerate(az):
        dirs[i, :, 0] = ce * np.cos(a)
        dirs[i, :, 1] = ce * np.sin(a)
        dirs[i, :, 2] = se
    return dirs


def gen_lidar_scan(gt, world, t_scan, scan_period, dirs, extrinsics, sigma_range,
                   rng, max_range=30.0, only_plane=None):
    """One sweep: per-column poses, per-point timestamps, radial range noise.

    Returns (points (m,4) [t,x,y,z] in LiDAR frame, hit plane index (m,)).
    Misses are dropped.
    """
    az_steps, rings, _ = dirs.shape
    R_il, p_il = extrinsics.R_il, extrinsics.p_il
    col_ts = t_scan + scan_period * np.arange(az_steps) / az_steps
    st = gt.states(col_ts)
    # expand per-column poses over the rings of each column
    origins = np.repeat(st["R"] @ p_il + st["p"], rings, axis=0)
    d_body = dirs @ R_il.T                          # (az, rings, 3)
    d_world = np.einsum("cij,crj->cri", st["R"], d_body).reshape(-1, 3)
    times = np.repeat(col_ts, rings)
    d_sensor = dirs.reshape(-1, 3)

    s, hit, mask = world.ray_intersect(origins, d_world, t_max=max_range,
                                       only_plane=only_plane)
    if not np.any(mask):
        return np.zeros((0, 4)), np.zeros(0, dtype=int)
    ranges = s[mask] + sigma_range * rng.normal(size=int(mask.sum()))
    pts = ranges[:, None] * d_sensor[mask]
    return np.column_stack([times[mask], pts]), hit[mask]


def gen_camera_frame(gt, landmarks, t, camera, pixel_sigma, outlier_rate, rng):
    """Visible landmarks projected with noise; a seeded fraction replaced by
    uniform outlier pixels, labeled in the returned mask."""
    R, p = gt.pose(t)
    pix, z, valid = camera.project_world(landmarks, R, p)
    ids = np.flatnonzero(valid)
    pix = pix[valid]
    pix = pix + pixel_sigma * rng.normal(size=pix.shape)
    outliers = rng.uniform(size=len(ids)) < outlier_rate
    if np.any(outliers):
        pix[outliers] = rng.uniform(
            [0.0, 0.0], [camera.width - 1.0, camera.height - 1.0],
            size=(int(outliers.sum()), 2))
    inside = (pix[:, 0] >= 0) & (pix[:, 0] < camera.width) \
        & (pix[:, 1] >= 0) & (pix[:, 1] < camera.height)
    frame = CameraFrame(t, ids[inside], pix[inside])
    return frame, outliers[inside]


@dataclass
class SimBundle:
    """Ground truth plus all sensor streams of one simulated run."""

    gt: SyntheticTrajectory
    world: PlaneWorld
    landmarks: np.ndarray
    imu: dict
    scans: list           # (t_scan, points (m,4), hit plane indices)
    frames: list          # CameraFrame
    outlier_masks: list   # parallel to frames
    camera: CameraModel
    extrinsics: ExtrinsicSet
    duration: float
    dt: float
    seed: int


def camera_from_config(cfg):
    return CameraModel(
        fx=cfg["camera.fx"], fy=cfg["camera.fy"],
        cx=cfg["camera.cx"], cy=cfg["camera.cy"],
        width=cfg["camera.width"], height=cfg["camera.height"],
        R_ic=R_IMU_CAMERA, p_ic=np.array([0.05, 0.0, 0.02]),
    )


def simulate_bundle(cfg):
    """Full deterministic bundle from a configuration."""
    seed = cfg["seed"]
    duration = cfg["sim.duration"]
    profile = MotionProfile(cfg["sim.regime"], duration, seed,
                            cfg["sim.start_hold"], cfg["sim.start_ramp"])
    gt = gen_trajectory(profile)
    world = default_world()
    extrinsics = default_extrinsics()
    camera = camera_from_config(cfg)

    rng_land = np.random.default_rng((seed, 1))
    landmarks = world.sample_landmarks(cfg["sim.n_landmarks"], rng_land)

    walk_scale = 1.0 / np.sqrt(cfg["dt"])  # per-interval sigma to per-sqrt-second
    imu = gen_imu(gt, duration, cfg["sim.imu_rate"],
                  cfg["noise.sigma_gyro"], cfg["noise.sigma_accel"],
                  cfg["noise.sigma_bg_walk"] * walk_scale,
                  cfg["noise.sigma_ba_walk"] * walk_scale,
                  (seed, 2),
                  np.asarray(cfg["sim.initial_gyro_bias"]),
                  np.asarray(cfg["sim.initial_accel_bias"]))

    dirs = lidar_ray_directions(cfg["sim.rings"], cfg["sim.azimuth_steps"])
    scan_period = 1.0 / cfg["sim.lidar_rate"]
    rng_lidar = np.random.default_rng((seed, 3))
    deg_start = cfg["sim.degenerate_start"]
    deg_end = deg_start + cfg["sim.degenerate_duration"]
    scans = []
    n_scans = int(np.floor(duration * cfg["sim.lidar_rate"]))
    for k in range(n_scans):
        t_scan = k * scan_period
        only = 0 if (deg_start >= 0.0 and deg_start <= t_scan < deg_end) else None
        pts, hit = gen_lidar_scan(gt, world, t_scan, scan_period, dirs, extrinsics,
                                  cfg["sim.lidar_sigma"], rng_lidar,
                                  cfg["sim.lidar_max_range"], only_plane=only)
        scans.append((t_scan, pts, hit))

    rng_cam = np.random.default_rng((seed, 4))
    frames = []
    outlier_masks = []
    n_frames = int(np.floor(duration * cfg["sim.camera_rate"]))
    for k in range(n_frames):
        t = k / cfg["sim.camera_rate"]
        frame, mask = gen_camera_frame(gt, landmarks, t, camera,
                                       cfg["sim.pixel_sigma"],
                                       cfg["sim.outlier_rate"], rng_cam)
        frames.append(frame)
        outlier_masks.append(mask)

    return SimBundle(gt, world, landmarks, imu, scans, frames, outlier_masks,
                     camera, extrinsics, duration, cfg["dt"], seed)
