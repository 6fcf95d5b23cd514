"""Ground-truth trajectory evaluation: RMSE of translation errors (ATE).

Multi-robot trajectories are concatenated and aligned with a single rigid
SE(3) transform (closed-form least squares), so merge errors between robots
stay visible; per-robot alignment would hide them.
"""

from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

from ..se3 import Pose

MAX_TIMESTAMP_GAP = 0.05


def rigid_align(src: np.ndarray, dst: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation + translation mapping src onto dst (no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    t = mu_d - R @ mu_s
    return R, t


def _associate(est, truth, max_gap):
    """Nearest-timestamp association within max_gap; both inputs sorted."""
    pairs = []
    times = np.array([ts for ts, _ in truth])
    for ts, pose in est:
        i = int(np.argmin(np.abs(times - ts)))
        if abs(times[i] - ts) <= max_gap:
            pairs.append((pose, truth[i][1]))
    return pairs


def compute_ate(
    estimate: Dict[int, List[Tuple[float, Pose]]],
    truth: Dict[int, List[Tuple[float, Pose]]],
    align: str = "se3",
    max_gap: float = MAX_TIMESTAMP_GAP,
) -> Tuple[float, np.ndarray]:
    """RMSE of translation errors over timestamp-matched pose pairs.

    align='se3' rigidly aligns the concatenated multi-robot trajectory first;
    align='none' compares in the given frames.
    """
    if align not in ("none", "se3"):
        raise ValueError(f"unknown alignment mode {align!r}")
    pairs = []
    for robot in sorted(estimate):
        if robot not in truth:
            continue
        pairs.extend(_associate(estimate[robot], truth[robot], max_gap))
    if not pairs:
        raise ValueError("no timestamp-matched pose pairs")
    est_t = np.array([p.t for p, _ in pairs])
    tru_t = np.array([q.t for _, q in pairs])
    if align == "se3":
        R, t = rigid_align(est_t, tru_t)
        est_t = est_t @ R.T + t
    errors = np.linalg.norm(est_t - tru_t, axis=1)
    rmse = float(np.sqrt(np.mean(errors ** 2)))
    return rmse, errors
