"""Pinhole camera model and frame containers shared by maps and simulator."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CameraModel:
    fx: float = 200.0
    fy: float = 200.0
    cx: float = 160.0
    cy: float = 160.0
    width: int = 320
    height: int = 320
    # camera-to-IMU extrinsics
    R_ic: np.ndarray = field(default_factory=lambda: np.eye(3))
    p_ic: np.ndarray = field(default_factory=lambda: np.zeros(3))
    depth_min: float = 0.05

    @property
    def intrinsics(self):
        return (self.fx, self.fy, self.cx, self.cy)

    def world_to_camera(self, points_world, R_wb, p_wb):
        """World points into the camera frame given the body pose."""
        pts = np.atleast_2d(points_world)
        body = (pts - p_wb) @ R_wb
        return (body - self.p_ic) @ self.R_ic

    def project_camera(self, p_cam):
        """Camera-frame points to pixels with validity (depth and bounds)."""
        p_cam = np.atleast_2d(p_cam)
        z = p_cam[:, 2]
        safe_z = np.where(np.abs(z) > 1e-12, z, 1e-12)
        pix = np.stack([
            self.fx * p_cam[:, 0] / safe_z + self.cx,
            self.fy * p_cam[:, 1] / safe_z + self.cy,
        ], axis=1)
        valid = (z >= self.depth_min) \
            & (pix[:, 0] >= 0.0) & (pix[:, 0] < self.width) \
            & (pix[:, 1] >= 0.0) & (pix[:, 1] < self.height)
        return pix, z, valid

    def project_world(self, points_world, R_wb, p_wb):
        return self.project_camera(self.world_to_camera(points_world, R_wb, p_wb))

    def ray_world(self, pixel, R_wb, p_wb):
        """Unit ray (origin, direction) of a pixel in the world frame."""
        d_cam = np.array([(pixel[0] - self.cx) / self.fx,
                          (pixel[1] - self.cy) / self.fy, 1.0])
        d_cam /= np.linalg.norm(d_cam)
        d_world = R_wb @ (self.R_ic @ d_cam)
        origin = R_wb @ self.p_ic + p_wb
        return origin, d_world


@dataclass
class CameraFrame:
    """Per-frame pixel correspondences from the tracking front end."""

    t: float
    ids: np.ndarray      # (n,) int landmark/track ids
    pixels: np.ndarray   # (n, 2) observed pixels
