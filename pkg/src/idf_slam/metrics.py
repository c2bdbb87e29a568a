"""Trajectory and reconstruction evaluation."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import MetricError
from .geometry import Pose


def associate(estimated, ground_truth, max_dt: float = 0.010) -> list[tuple[int, int]]:
    """Pair trajectory entries by nearest timestamp within max_dt seconds."""
    gt_times = np.array([t for t, _ in ground_truth])
    order = np.argsort(gt_times)
    pairs = []
    for i, (t, _) in enumerate(estimated):
        j = int(np.searchsorted(gt_times[order], t))
        best = None
        for cand in (j - 1, j):
            if 0 <= cand < len(order):
                dt = abs(gt_times[order[cand]] - t)
                if dt <= max_dt and (best is None or dt < best[0]):
                    best = (dt, order[cand])
        if best is not None:
            pairs.append((i, int(best[1])))
    return pairs


def align_rigid(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form R, t minimizing Σ‖(R·source + t) − target‖² (no scale)."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    m = (target - mu_t).T @ (source - mu_s)
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    r = (u * np.array([1.0, 1.0, d])) @ vt
    return r, mu_t - r @ mu_s


def ate(estimated, ground_truth, max_dt: float = 0.010) -> dict:
    """Absolute trajectory error after rigid alignment of the estimate.

    Trajectories are lists of (timestamp, Pose). Returns translational error
    statistics in meters.
    """
    pairs = associate(estimated, ground_truth, max_dt)
    if len(pairs) < 3:
        raise MetricError(f"only {len(pairs)} associated poses; need at least 3")
    est = np.array([estimated[i][1].translation for i, _ in pairs])
    gt = np.array([ground_truth[j][1].translation for _, j in pairs])
    r, t = align_rigid(est, gt)
    err = np.linalg.norm(est @ r.T + t - gt, axis=1)
    return {
        "rmse": float(np.sqrt(np.mean(err ** 2))),
        "mean": float(err.mean()),
        "median": float(np.median(err)),
        "n_poses": len(pairs),
    }


def reconstruction_metrics(pred_points: np.ndarray, gt_points: np.ndarray, tau: float) -> dict:
    """Accuracy / completion / completion ratio between surface point sets.

    accuracy: mean predicted-to-truth nearest distance; completion: mean
    truth-to-predicted; completion_ratio: percentage of truth points within
    tau of the prediction.
    """
    pred_points = np.asarray(pred_points, dtype=np.float64)
    gt_points = np.asarray(gt_points, dtype=np.float64)
    if pred_points.size == 0 or gt_points.size == 0:
        raise MetricError("empty point set")
    d_pred_to_gt, _ = cKDTree(gt_points).query(pred_points)
    d_gt_to_pred, _ = cKDTree(pred_points).query(gt_points)
    return {
        "accuracy": float(d_pred_to_gt.mean()),
        "completion": float(d_gt_to_pred.mean()),
        "completion_ratio": float((d_gt_to_pred < tau).mean() * 100.0),
    }


def observed_mask(points: np.ndarray, frames, poses, tol: float = 0.03) -> np.ndarray:
    """Which points were actually seen: projects into some frame, in bounds,
    with depth agreement within tol (a free line of sight)."""
    points = np.asarray(points, dtype=np.float64)
    seen = np.zeros(points.shape[0], dtype=bool)
    for frame, pose in zip(frames, poses):
        if seen.all():
            break
        intr = frame.intrinsics
        local = (points - pose.translation) @ pose.rotation
        z = local[:, 2]
        front = z > 1e-6
        u = np.where(front, intr.fx * local[:, 0] / np.where(front, z, 1.0) + intr.cx, -1)
        v = np.where(front, intr.fy * local[:, 1] / np.where(front, z, 1.0) + intr.cy, -1)
        ui = np.rint(u).astype(int)
        vi = np.rint(v).astype(int)
        inside = front & (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
        idx = np.nonzero(inside)[0]
        if idx.size == 0:
            continue
        measured = frame.depth[vi[idx], ui[idx]]
        ok = (measured > 0) & (np.abs(measured - z[idx]) < tol)
        seen[idx[ok]] = True
    return seen
