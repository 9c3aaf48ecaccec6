"""Trajectory evaluation: TUM pose files, rigid alignment, translational RMSE."""

import numpy as np

from . import so3


def read_tum(path):
    """TUM rows `t tx ty tz qx qy qz qw` as (times (n,), positions (n,3), quats (n,4))."""
    rows = np.loadtxt(path, ndmin=2)
    if rows.shape[1] != 8:
        raise ValueError("TUM file must have 8 columns")
    return rows[:, 0], rows[:, 1:4], rows[:, 4:8]


def write_tum(path, times, positions, quats):
    with open(path, "w") as f:
        for t, p, q in zip(times, positions, quats):
            f.write(f"{t:.6f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                    f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")


def associate(times_a, times_b, max_dt=1e-3):
    """Nearest-timestamp pairing within max_dt; indices into both arrays."""
    ia, ib = [], []
    j = 0
    for i, t in enumerate(times_a):
        j = int(np.searchsorted(times_b, t))
        best, best_dt = -1, max_dt + 1e-12
        for cand in (j - 1, j):
            if 0 <= cand < len(times_b):
                dt = abs(times_b[cand] - t)
                if dt < best_dt:
                    best, best_dt = cand, dt
        if best >= 0:
            ia.append(i)
            ib.append(best)
    return np.asarray(ia, dtype=int), np.asarray(ib, dtype=int)


def umeyama_alignment(source, target):
    """Closed-form rigid transform (R, t) minimizing ||R s + t - target||^2.

    Scale is fixed to one.
    """
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0.0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_d - R @ mu_s
    return R, t


def ate_rmse(est_times, est_pos, gt_times, gt_pos, align=True, max_dt=1e-3):
    """RMSE of translational error over timestamp-associated samples.

    With align=True the estimate is first rigidly aligned to the ground
    truth (Umeyama, unit scale).
    """
    ia, ib = associate(est_times, gt_times, max_dt)
    if ia.size < 2:
        raise ValueError("fewer than two common timestamps")
    est = np.asarray(est_pos)[ia]
    gt = np.asarray(gt_pos)[ib]
    if align:
        R, t = umeyama_alignment(est, gt)
        est = est @ R.T + t
    err = np.linalg.norm(est - gt, axis=1)
    return {
        "ate_rmse_m": float(np.sqrt(np.mean(err ** 2))),
        "mean_m": float(np.mean(err)),
        "max_m": float(np.max(err)),
        "n_poses": int(ia.size),
    }


def evaluate_tum_files(est_path, gt_path, align=True):
    et, ep, _ = read_tum(est_path)
    gt, gp, _ = read_tum(gt_path)
    return ate_rmse(et, ep, gt, gp, align=align)


def rotation_rmse_deg(est_quats, gt_quats):
    """Auxiliary rotational RMSE in degrees over paired samples."""
    errs = []
    for qa, qb in zip(est_quats, gt_quats):
        Ra = so3.quat_to_matrix(so3.quat_normalize(qa))
        Rb = so3.quat_to_matrix(so3.quat_normalize(qb))
        errs.append(so3.rotation_distance(Ra, Rb))
    return float(np.degrees(np.sqrt(np.mean(np.square(errs)))))
