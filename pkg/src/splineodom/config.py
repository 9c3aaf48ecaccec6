"""Key-value configuration with dotted sections and full defaults.

The file format is one `key = value` per line, `#` starts a comment.
Every key has a default; values are coerced to the default's type
(numbers, booleans, strings, or comma-separated number lists). The
effective configuration is echoed into each output directory so a run is
reproducible from its artifacts alone.
"""

import math

DEFAULTS = {
    "dt": 0.1,
    "mode": "non-uniform",
    "seed": 0,
    "use_lidar": True,
    "use_camera": True,
    "use_imu": True,
    "align": True,

    "placement.gyro_thresholds": (0.3, 0.7, 1.4),
    "placement.accel_thresholds": (0.8, 1.8, 3.6),
    "placement.counts": (1, 2, 3, 4),

    "noise.sigma_lidar": 0.05,
    "noise.sigma_pixel": 1.5,
    "noise.cauchy_scale": 2.0,
    "noise.sigma_gyro": 1.7e-3,
    "noise.sigma_accel": 2e-2,
    "noise.sigma_bg_walk": 1e-4,
    "noise.sigma_ba_walk": 1e-3,

    "solver.max_iterations": 12,
    "solver.initial_lambda": 1e-4,
    "solver.lambda_up": 10.0,
    "solver.lambda_down": 0.5,
    "solver.cost_tolerance": 1e-8,
    "solver.step_tolerance": 1e-10,

    "maps.keyscan_dt": 0.3,
    "maps.keyscan_dist": 0.2,
    "maps.keyscan_capacity": 20,
    "maps.voxel_resolution": 0.1,
    "maps.voxel_cap": 10,
    "maps.plane_tolerance": 0.05,

    "visual.grid_rows": 8,
    "visual.grid_cols": 8,
    "visual.gate_px": 5.0,
    "visual.admit_px": 6.0,
    "visual.ransac_iterations": 60,
    "visual.ransac_threshold_px": 2.0,
    "visual.min_ransac_pairs": 8,
    "visual.max_depth": 30.0,

    "estimator.knn": 5,
    "estimator.max_lidar_factors": 120,
    "estimator.max_assoc_dist": 0.4,
    "estimator.residual_gate": 0.15,
    "estimator.static_init_duration": 0.5,
    "estimator.anchor_sigma_pose": 1e-4,
    "estimator.anchor_sigma_bg": 1e-3,
    "estimator.anchor_sigma_ba": 1e-2,

    "placement.retry_misfit": 4.0,
    "placement.use_half_window": True,
    "placement.damp_downshift": True,

    "camera.fx": 200.0,
    "camera.fy": 200.0,
    "camera.cx": 160.0,
    "camera.cy": 160.0,
    "camera.width": 320,
    "camera.height": 320,

    "sim.duration": 30.0,
    "sim.regime": "smooth",
    "sim.imu_rate": 400.0,
    "sim.lidar_rate": 10.0,
    "sim.camera_rate": 15.0,
    "sim.rings": 16,
    "sim.azimuth_steps": 60,
    "sim.lidar_sigma": 0.02,
    "sim.lidar_max_range": 30.0,
    "sim.pixel_sigma": 1.5,
    "sim.outlier_rate": 0.0,
    "sim.n_landmarks": 400,
    "sim.start_hold": 1.0,
    "sim.start_ramp": 2.0,
    "sim.degenerate_start": -1.0,
    "sim.degenerate_duration": 0.0,
    "sim.initial_gyro_bias": (0.0, 0.0, 0.0),
    "sim.initial_accel_bias": (0.0, 0.0, 0.0),
}


class ConfigError(ValueError):
    pass


def _coerce(key, raw, default):
    if isinstance(raw, str):
        raw = raw.strip()
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {raw!r}")
    if isinstance(default, tuple):
        if isinstance(raw, (tuple, list)):
            items = raw
        else:
            items = [v for v in raw.split(",") if v.strip()]
        elem = float if any(isinstance(d, float) for d in default) else int
        return tuple(elem(v) for v in items)
    if isinstance(default, int) and not isinstance(default, bool):
        value = float(raw)
        if not value.is_integer():
            raise ConfigError(f"{key}: expected integer, got {raw!r}")
        return int(value)
    if isinstance(default, float):
        value = float(raw)
        if math.isnan(value):
            raise ConfigError(f"{key}: NaN not allowed")
        return value
    return str(raw)


class Config:
    def __init__(self, overrides=None):
        self._values = dict(DEFAULTS)
        for key, value in (overrides or {}).items():
            self.set(key, value)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key: {key}")
        self._values[key] = _coerce(key, value, DEFAULTS[key])

    def get(self, key):
        if key not in self._values:
            raise ConfigError(f"unknown configuration key: {key}")
        return self._values[key]

    def __getitem__(self, key):
        return self.get(key)

    def update_from_file(self, path):
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, value = line.split("=", 1)
                self.set(key.strip(), value.strip())
        return self

    def to_text(self):
        lines = []
        for key in sorted(self._values):
            value = self._values[key]
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path):
        return cls().update_from_file(path)

    def copy(self):
        out = Config()
        out._values = dict(self._values)
        return out
