"""World maps: local keyscan map, global voxel map, tracked visual points.

The local map serves scan-to-map plane association: it unions the points of
recent keyscans (selected by elapsed time or traveled distance) behind an
exact nearest-neighbor index. The global voxel map stores all LiDAR points
in a 0.1 m hash for associating image pixels with map points of known
position; the tracked point set carries those associations across frames
with outlier rejection (epipolar RANSAC plus a predicted-pose reprojection
gate) and even image coverage.

Single writer per pipeline stage; concurrent reads between writes are safe.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .factors import ReprojectionFactor

logger = logging.getLogger(__name__)


@dataclass
class Plane:
    normal: np.ndarray
    d: float
    fit_rms: float


def voxel_downsample(points, resolution):
    """Voxel-mean downsampling; deterministic (sorted voxel keys)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        return pts
    keys = np.floor(pts / resolution).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    pts = pts[order]
    boundaries = np.any(np.diff(keys, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.flatnonzero(boundaries) + 1, [len(pts)]])
    out = np.empty((len(starts) - 1, 3))
    for i in range(len(starts) - 1):
        out[i] = pts[starts[i]:starts[i + 1]].mean(axis=0)
    return out


def fit_plane(points, tolerance=0.05, min_spread=0.0):
    """Least-squares plane through exactly five neighbor points.

    Normal sign is chosen so the centroid has non-negative coordinate along
    the normal (d = -n.centroid <= 0). Returns None for degenerate spreads
    (collinear, or in-plane spread below min_spread) or when any point lies
    farther than `tolerance` from the plane.
    """
    pts = np.asarray(points, dtype=float)
    if pts.shape != (5, 3):
        raise ValueError("plane fitting expects exactly five points")
    centroid = pts.mean(axis=0)
    Q = pts - centroid
    _, S, Vt = np.linalg.svd(Q, full_matrices=False)
    if S[1] < max(1e-6 * S[0], 1e-12, min_spread):
        return None  # collinear or clumped spread
    normal = Vt[2]
    if normal @ centroid < 0.0:
        normal = -normal
    d = float(-normal @ centroid)
    dists = Q @ normal
    if np.max(np.abs(dists)) > tolerance:
        return None
    return Plane(normal, d, float(np.sqrt(np.mean(dists ** 2))))


def knn_brute(points, query, k):
    """Brute-force exact k nearest neighbors (stable in insertion order)."""
    pts = np.asarray(points, dtype=float)
    d2 = np.sum((pts - np.asarray(query)) ** 2, axis=1)
    order = np.argsort(d2, kind="stable")[:k]
    return pts[order]


class LocalMap:
    """Keyscan-based local LiDAR map with an exact spatial index."""

    def __init__(self, keyscan_dt=0.3, keyscan_dist=0.2, capacity=20):
        self.keyscan_dt = keyscan_dt
        self.keyscan_dist = keyscan_dist
        self.capacity = capacity
        self.keyscans = []  # (t, sensor position, world points)
        self._tree = None
        self._points = np.zeros((0, 3))

    def __len__(self):
        return self._points.shape[0]

    @property
    def n_keyscans(self):
        return len(self.keyscans)

    @property
    def points(self):
        return self._points

    def _rebuild(self):
        if self.keyscans:
            self._points = np.concatenate([ks[2] for ks in self.keyscans])
            self._tree = cKDTree(self._points)
        else:
            self._points = np.zeros((0, 3))
            self._tree = None

    def insert_scan(self, points_world, position, t):
        """Admit the scan as a keyscan by elapsed time OR traveled distance.

        Points must already be deskewed into the world frame. Returns True
        when the scan was admitted; the oldest keyscan is evicted beyond
        capacity.
        """
        points_world = np.asarray(points_world, dtype=float).reshape(-1, 3)
        if self.keyscans:
            t_last, p_last, _ = self.keyscans[-1]
            if (t - t_last) < self.keyscan_dt and \
                    np.linalg.norm(np.asarray(position) - p_last) < self.keyscan_dist:
                return False
        self.keyscans.append((t, np.asarray(position, dtype=float).copy(), points_world))
        if len(self.keyscans) > self.capacity:
            self.keyscans.pop(0)
        self._rebuild()
        return True

    def knn(self, query, k):
        """Exact k nearest map points by Euclidean distance.

        Returns fewer than k points when the map is smaller; the caller
        rejects the association in that case.
        """
        if self._tree is None:
            return np.zeros((0, 3))
        k_eff = min(k, len(self))
        dist, idx = self._tree.query(np.asarray(query, dtype=float), k=k_eff)
        idx = np.atleast_1d(idx)
        return self._points[idx]

    def knn_batch(self, queries, k):
        """Vectorized knn for many queries: (m, k, 3) array (m trimmed rows ok)."""
        if self._tree is None or len(self) < k:
            return None
        _, idx = self._tree.query(np.asarray(queries, dtype=float), k=k)
        return self._points[idx]


class GlobalVoxelMap:
    """World points hashed by 0.1 m voxel with a per-voxel point cap."""

    def __init__(self, resolution=0.1, per_voxel_cap=10):
        self.resolution = resolution
        self.per_voxel_cap = per_voxel_cap
        self.voxels = {}
        self.n_points = 0

    def voxel_index(self, point):
        return tuple(int(v) for v in np.floor(np.asarray(point) / self.resolution))

    def insert(self, points_world):
        """Bin points, keeping first arrivals up to the per-voxel cap."""
        pts = np.asarray(points_world, dtype=float).reshape(-1, 3)
        keys = np.floor(pts / self.resolution).astype(np.int64)
        for p, key in zip(pts, map(tuple, keys)):
            bucket = self.voxels.get(key)
            if bucket is None:
                self.voxels[key] = [p]
                self.n_points += 1
            elif len(bucket) < self.per_voxel_cap:
                bucket.append(p)
                self.n_points += 1

    def points_along_ray(self, origin, direction, t_min, t_max):
        """Map points in voxels pierced by the ray (with 6-neighborhoods)."""
        res = self.resolution
        steps = np.arange(t_min, t_max, res)
        seen = set()
        out = []
        offsets = [(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0),
                   (0, -1, 0), (0, 0, 1), (0, 0, -1)]
        for s in steps:
            base = np.floor((origin + s * direction) / res).astype(np.int64)
            for off in offsets:
                key = (int(base[0] + off[0]), int(base[1] + off[1]), int(base[2] + off[2]))
                if key in seen:
                    continue
                seen.add(key)
                bucket = self.voxels.get(key)
                if bucket:
                    out.extend(bucket)
        return np.asarray(out).reshape(-1, 3)


# -------------------------------------------------------- visual tracking

@dataclass
class TrackedPoint:
    track_id: int
    point_world: np.ndarray
    pixel: np.ndarray
    age: int = 0
    reproj_err: float = 0.0


@dataclass
class TrackedPointSet:
    entries: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)


@dataclass
class VisualFrontendConfig:
    gate_px: float = 5.0
    admit_px: float = 6.0
    grid_rows: int = 8
    grid_cols: int = 8
    ransac_iterations: int = 60
    ransac_threshold_px: float = 2.0
    ransac_min_pairs: int = 8
    ransac_min_inlier_ratio: float = 0.5
    max_depth: float = 25.0


def _normalize_points(pts):
    centroid = pts.mean(axis=0)
    scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - centroid, axis=1)), 1e-12)
    T = np.array([
        [scale, 0.0, -scale * centroid[0]],
        [0.0, scale, -scale * centroid[1]],
        [0.0, 0.0, 1.0],
    ])
    homog = np.column_stack([pts, np.ones(len(pts))])
    return homog @ T.T, T


def _fundamental_8point(p1, p2):
    n1, T1 = _normalize_points(p1)
    n2, T2 = _normalize_points(p2)
    A = np.column_stack([
        n2[:, 0] * n1[:, 0], n2[:, 0] * n1[:, 1], n2[:, 0],
        n2[:, 1] * n1[:, 0], n2[:, 1] * n1[:, 1], n2[:, 1],
        n1[:, 0], n1[:, 1], np.ones(len(n1)),
    ])
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    U, S, Vt = np.linalg.svd(F)
    F = U @ np.diag([S[0], S[1], 0.0]) @ Vt
    return T2.T @ F @ T1


def _sampson_distance(F, p1, p2):
    h1 = np.column_stack([p1, np.ones(len(p1))])
    h2 = np.column_stack([p2, np.ones(len(p2))])
    Fx1 = h1 @ F.T
    Ftx2 = h2 @ F
    num = np.sum(h2 * Fx1, axis=1) ** 2
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    return num / np.clip(den, 1e-12, None)


def ransac_fundamental(p1, p2, rng, iterations=60, threshold_px=2.0):
    """Seeded 8-point RANSAC; returns an inlier mask over the pairs."""
    n = len(p1)
    best_mask = np.ones(n, dtype=bool)
    best_count = -1
    thr2 = threshold_px * threshold_px
    for _ in range(iterations):
        sample = rng.choice(n, size=8, replace=False)
        try:
            F = _fundamental_8point(p1[sample], p2[sample])
        except np.linalg.LinAlgError:
            continue
        mask = _sampson_distance(F, p1, p2) < thr2
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    return best_mask


def associate_frame(tracked, voxel_map, frame, predicted_pose, camera,
                    config=None, rng=None, prev_pixels=None):
    """Track map points into the frame and admit new ones per free grid cell.

    Steps: (a) continue existing tracks via the frame's correspondence ids,
    (b) reject epipolar outliers by fundamental-matrix RANSAC against the
    previous frame's pixels, (c) gate on predicted-pose reprojection error,
    evicting large-error points, (d) project new voxel-map points into free
    image grid cells, admitting nearest-depth-first.

    Returns (reprojection factors, stats dict). `tracked` is updated in
    place; every surviving entry reprojects within gate_px under the
    predicted pose, and no grid cell holds more than one entry.
    """
    config = config or VisualFrontendConfig()
    rng = rng or np.random.default_rng(0)
    R, p = predicted_pose
    stats = {"matched": 0, "ransac_removed": 0, "gate_removed": 0,
             "admitted": 0, "ransac_skipped": False}

    frame_ids = np.asarray(frame.ids, dtype=int)
    pix_by_id = {int(i): frame.pixels[j] for j, i in enumerate(frame_ids)}

    # (a) continuations
    cont_ids = [tid for tid in tracked.entries if tid in pix_by_id]
    stats["matched"] = len(cont_ids)

    # (b) epipolar RANSAC between consecutive frames' pixel sets
    keep = set(cont_ids)
    if len(cont_ids) >= config.ransac_min_pairs:
        prev = np.array([
            prev_pixels[tid] if prev_pixels and tid in prev_pixels
            else tracked.entries[tid].pixel
            for tid in cont_ids
        ])
        curr = np.array([pix_by_id[tid] for tid in cont_ids])
        mask = ransac_fundamental(prev, curr, rng,
                                  iterations=config.ransac_iterations,
                                  threshold_px=config.ransac_threshold_px)
        if mask.mean() >= config.ransac_min_inlier_ratio:
            keep = {tid for tid, ok in zip(cont_ids, mask) if ok}
            stats["ransac_removed"] = len(cont_ids) - len(keep)
        else:
            stats["ransac_skipped"] = True  # degenerate geometry, rely on the gate
    else:
        stats["ransac_skipped"] = True

    # (c) predicted-pose reprojection gate + eviction of lost/large-error tracks
    survivors = {}
    for tid in cont_ids:
        if tid not in keep:
            continue
        entry = tracked.entries[tid]
        pix_pred, z, valid = camera.project_world(entry.point_world, R, p)
        obs = pix_by_id[tid]
        err = float(np.linalg.norm(pix_pred[0] - obs))
        if not valid[0] or err > config.gate_px:
            stats["gate_removed"] += 1
            continue
        survivors[tid] = TrackedPoint(tid, entry.point_world, np.asarray(obs, float),
                                      entry.age + 1, err)

    # (d) admission of new map points, nearest-depth-first per free grid cell
    cell_w = camera.width / config.grid_cols
    cell_h = camera.height / config.grid_rows

    def cell_of(pix):
        return (min(int(pix[1] // cell_h), config.grid_rows - 1),
                min(int(pix[0] // cell_w), config.grid_cols - 1))

    occupied = {cell_of(e.pixel) for e in survivors.values()}
    used_points = {tuple(np.round(e.point_world, 6)) for e in survivors.values()}
    candidates = []
    for tid, obs in pix_by_id.items():
        if tid in survivors or tid in tracked.entries:
            continue
        origin, direction = camera.ray_world(obs, R, p)
        pts = voxel_map.points_along_ray(origin, direction,
                                         camera.depth_min, config.max_depth)
        if pts.size == 0:
            continue
        pix_m, z_m, valid_m = camera.project_world(pts, R, p)
        err = np.linalg.norm(pix_m - np.asarray(obs), axis=1)
        ok = valid_m & (err <= config.admit_px)
        if not np.any(ok):
            continue
        depths = np.where(ok, z_m, np.inf)
        j = int(np.argmin(depths))
        # keep the bearing of the observed pixel, take the range from the
        # map point: the association assigns depth, not direction
        rng_along = float((pts[j] - origin) @ direction)
        point = origin + rng_along * direction
        candidates.append((float(z_m[j]), tid, point, np.asarray(obs, float), float(err[j])))

    for depth, tid, point, obs, err in sorted(candidates, key=lambda c: c[0]):
        cell = cell_of(obs)
        if cell in occupied:
            continue
        key = tuple(np.round(point, 6))
        if key in used_points:
            continue
        occupied.add(cell)
        used_points.add(key)
        survivors[tid] = TrackedPoint(tid, point, obs, 0, err)
        stats["admitted"] += 1

    # enforce grid evenness among survivors (older, then lower error, wins)
    by_cell = {}
    for tid, e in survivors.items():
        by_cell.setdefault(cell_of(e.pixel), []).append(e)
    final = {}
    for cell, entries in by_cell.items():
        entries.sort(key=lambda e: (-e.age, e.reproj_err))
        final[entries[0].track_id] = entries[0]

    tracked.entries = final
    # only confirmed tracks (seen consistently at least twice) constrain the
    # estimate; a spurious admission never survives its second frame
    factors = []
    factor_ids = []
    for e in final.values():
        if e.age >= 1:
            factors.append(ReprojectionFactor(e.point_world.copy(), e.pixel.copy(),
                                              frame.t, camera.intrinsics))
            factor_ids.append(e.track_id)
    stats["factor_ids"] = factor_ids
    return factors, stats


# ---------------------------------------------------------------- exports

def save_xyz(path, points):
    """ASCII point list `x y z` per line for visualization."""
    points = np.asarray(points).reshape(-1, 3)
    with open(path, "w") as f:
        for p in points:
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")


def save_tracked_debug(path, tracked):
    """Tracked point debug CSV: u v x y z err_px age."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["u", "v", "x", "y", "z", "err_px", "age"])
        for e in tracked.entries.values():
            w.writerow([f"{e.pixel[0]:.3f}", f"{e.pixel[1]:.3f}",
                        f"{e.point_world[0]:.6f}", f"{e.point_world[1]:.6f}",
                        f"{e.point_world[2]:.6f}", f"{e.reproj_err:.4f}", e.age])
