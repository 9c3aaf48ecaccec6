"""Bundle directory serialization.

A bundle directory holds one simulated run:

    imu.csv                 t,wx,wy,wz,ax,ay,az
    lidar/scan_<t>.csv      t_point,x,y,z        (sensor frame)
    camera/frame_<t>.csv    landmark_id,u,v
    landmarks.csv           id,x,y,z
    gt.tum                  ground truth at 100 Hz
    config                  effective configuration snapshot
    outlier_labels.csv      t,landmark_id        (internal evaluation labels)

Writing is deterministic: identical bundles serialize byte-identically.
"""

import os

import numpy as np

from .camera import CameraFrame


def _fmt(x, nd=9):
    return f"{x:.{nd}f}"


def write_bundle(bundle, out_dir, cfg):
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "lidar"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "camera"), exist_ok=True)

    with open(os.path.join(out_dir, "imu.csv"), "w") as f:
        f.write("t,wx,wy,wz,ax,ay,az\n")
        for t, w, a in zip(bundle.imu["t"], bundle.imu["gyro"], bundle.imu["accel"]):
            f.write(",".join([_fmt(t, 6)] + [_fmt(v) for v in (*w, *a)]) + "\n")

    for t_scan, pts, _ in bundle.scans:
        path = os.path.join(out_dir, "lidar", f"scan_{t_scan:.6f}.csv")
        with open(path, "w") as f:
            f.write("t_point,x,y,z\n")
            for row in pts:
                f.write(",".join([_fmt(row[0], 6)] + [_fmt(v) for v in row[1:]]) + "\n")

    for frame in bundle.frames:
        path = os.path.join(out_dir, "camera", f"frame_{frame.t:.6f}.csv")
        with open(path, "w") as f:
            f.write("landmark_id,u,v\n")
            for i, pix in zip(frame.ids, frame.pixels):
                f.write(f"{int(i)},{_fmt(pix[0], 4)},{_fmt(pix[1], 4)}\n")

    with open(os.path.join(out_dir, "landmarks.csv"), "w") as f:
        f.write("id,x,y,z\n")
        for i, p in enumerate(bundle.landmarks):
            f.write(f"{i}," + ",".join(_fmt(v) for v in p) + "\n")

    with open(os.path.join(out_dir, "gt.tum"), "w") as f:
        f.write(bundle.gt.tum_text(100.0))

    with open(os.path.join(out_dir, "outlier_labels.csv"), "w") as f:
        f.write("t,landmark_id\n")
        for frame, mask in zip(bundle.frames, bundle.outlier_masks):
            for i, bad in zip(frame.ids, mask):
                if bad:
                    f.write(f"{frame.t:.6f},{int(i)}\n")

    cfg.save(os.path.join(out_dir, "config"))
    return out_dir


class LoadedBundle:
    """Bundle read back from disk; the estimator consumes this form."""

    def __init__(self, imu, scans, frames, landmarks, gt_tum, outlier_labels, cfg):
        self.imu = imu
        self.scans = scans            # (t_scan, points (m,4))
        self.frames = frames          # CameraFrame
        self.landmarks = landmarks
        self.gt_tum = gt_tum          # (times, positions, quats)
        self.outlier_labels = outlier_labels
        self.config = cfg

    @property
    def duration(self):
        return self.config["sim.duration"]


def read_bundle(path):
    from .config import Config
    from .evaluation import read_tum

    cfg = Config.load(os.path.join(path, "config"))

    rows = np.loadtxt(os.path.join(path, "imu.csv"), delimiter=",", skiprows=1, ndmin=2)
    imu = {"t": rows[:, 0], "gyro": rows[:, 1:4], "accel": rows[:, 4:7]}

    scans = []
    lidar_dir = os.path.join(path, "lidar")
    for name in sorted(os.listdir(lidar_dir)):
        t_scan = float(name[len("scan_"):-len(".csv")])
        pts = np.loadtxt(os.path.join(lidar_dir, name), delimiter=",", skiprows=1,
                         ndmin=2)
        if pts.size == 0:
            pts = np.zeros((0, 4))
        scans.append((t_scan, pts))
    scans.sort(key=lambda s: s[0])

    frames = []
    cam_dir = os.path.join(path, "camera")
    for name in sorted(os.listdir(cam_dir)):
        t = float(name[len("frame_"):-len(".csv")])
        rows = np.loadtxt(os.path.join(cam_dir, name), delimiter=",", skiprows=1,
                          ndmin=2)
        if rows.size == 0:
            frames.append(CameraFrame(t, np.zeros(0, dtype=int), np.zeros((0, 2))))
        else:
            frames.append(CameraFrame(t, rows[:, 0].astype(int), rows[:, 1:3]))
    frames.sort(key=lambda f: f.t)

    rows = np.loadtxt(os.path.join(path, "landmarks.csv"), delimiter=",", skiprows=1,
                      ndmin=2)
    landmarks = rows[:, 1:4]

    labels = set()
    label_path = os.path.join(path, "outlier_labels.csv")
    if os.path.exists(label_path):
        with open(label_path) as f:
            next(f)
            for line in f:
                t_str, id_str = line.strip().split(",")
                labels.add((t_str, int(id_str)))

    gt = read_tum(os.path.join(path, "gt.tum"))
    return LoadedBundle(imu, scans, frames, landmarks, gt, labels, cfg)
