"""Odometry and map quality metrics.

Relative errors follow the KITTI protocol: from every start frame, the
segment ends at the first frame whose ground-truth path length exceeds the
start plus the segment length. Segment lengths default to 5–40 m for
synthetic runs; the KITTI lengths (100–800 m) are available as
``KITTI_LENGTHS``.

RPCDL is reported as the fraction of map points within the clutter
threshold of the ground-truth map, i.e. the complement of the clutter
ratio. It is an operationalisation, not the original definition.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

DESK_LENGTHS = (5.0, 10.0, 20.0, 40.0)
KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
CLUTTER_THRESHOLD = 0.65
TIME_TOLERANCE = 1e-3


@dataclass
class OdomErrorReport:
    translation_pct: float
    rotation_deg_per_100m: float
    per_length: dict = field(default_factory=dict)  # L -> {"translation_pct", "rotation_deg_per_100m", "segments"}
    n_segments: int = 0
    empty: bool = False

    def to_dict(self) -> dict:
        return {"translation_pct": self.translation_pct, "rotation_deg_per_100m": self.rotation_deg_per_100m,
                "n_segments": self.n_segments, "empty": self.empty,
                "per_length": {repr(float(k)): v for k, v in self.per_length.items()}}


@dataclass
class MapQualityReport:
    chamfer: float
    hausdorff: float
    clutter_ratio: float
    rpcdl: float
    n_points: int
    n_gt: int
    threshold: float = CLUTTER_THRESHOLD
    empty: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# -- SE(2) helpers ------------------------------------------------------------------------

def se2_matrix(pose) -> np.ndarray:
    x, y, yaw = pose
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, x], [s, c, y], [0.0, 0.0, 1.0]])


def se2_matrices(poses) -> np.ndarray:
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 3)
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    out = np.zeros((len(poses), 3, 3))
    out[:, 0, 0], out[:, 0, 1], out[:, 0, 2] = c, -s, poses[:, 0]
    out[:, 1, 0], out[:, 1, 1], out[:, 1, 2] = s, c, poses[:, 1]
    out[:, 2, 2] = 1.0
    return out


def se2_inv(m: np.ndarray) -> np.ndarray:
    R = m[..., :2, :2]
    t = m[..., :2, 2]
    out = np.zeros_like(m)
    Rt = np.swapaxes(R, -1, -2)
    out[..., :2, :2] = Rt
    out[..., :2, 2] = -np.einsum("...ij,...j->...i", Rt, t)
    out[..., 2, 2] = 1.0
    return out


def matrices_to_poses(m: np.ndarray) -> np.ndarray:
    return np.stack([m[..., 0, 2], m[..., 1, 2], np.arctan2(m[..., 1, 0], m[..., 0, 0])], axis=-1)


def align_to_first(est_poses, gt_first) -> np.ndarray:
    """Express poses given relative to their first frame in the gt world frame."""
    est_poses = np.asarray(est_poses, dtype=np.float64).reshape(-1, 3)
    if np.array_equal(est_poses[0], np.asarray(gt_first, dtype=np.float64)):
        return est_poses.copy()  # already aligned; skip the rounding of a no-op transform
    G = se2_matrix(gt_first)
    E = se2_matrices(est_poses)
    E0 = se2_inv(E[0])
    return matrices_to_poses(G @ E0 @ E)


def transform_points(points, pose) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    m = se2_matrix(pose)
    return points @ m[:2, :2].T + m[:2, 2]


def match_times(est_t, gt_t, tol: float = TIME_TOLERANCE) -> np.ndarray:
    """Index into ``gt_t`` of the nearest timestamp for every ``est_t``."""
    est_t = np.asarray(est_t, dtype=np.float64)
    gt_t = np.asarray(gt_t, dtype=np.float64)
    if len(gt_t) == 0:
        raise ValueError("ground truth has no timestamps")
    order = np.argsort(gt_t)
    pos = np.clip(np.searchsorted(gt_t[order], est_t), 1, len(gt_t) - 1) if len(gt_t) > 1 else np.zeros(len(est_t), int)
    if len(gt_t) > 1:
        left = order[pos - 1]
        right = order[pos]
        idx = np.where(np.abs(gt_t[left] - est_t) <= np.abs(gt_t[right] - est_t), left, right)
    else:
        idx = pos
    gap = np.abs(gt_t[idx] - est_t)
    if np.any(gap > tol):
        i = int(np.argmax(gap))
        raise ValueError(f"estimate time {est_t[i]:.6f} has no ground truth within {tol * 1e3:g} ms")
    return idx


# -- odometry -----------------------------------------------------------------------------------

def path_distances(poses) -> np.ndarray:
    poses = np.asarray(poses, dtype=np.float64)
    step = np.hypot(*np.diff(poses[:, :2], axis=0).T)
    return np.concatenate([[0.0], np.cumsum(step)])


def relative_errors(est, gt, segment_lengths=DESK_LENGTHS, step: int = 1) -> OdomErrorReport:
    """Mean relative translation (%) and rotation (deg/100 m) errors.

    ``est`` and ``gt`` are time-aligned (K, 3) arrays of (x, y, yaw).
    """
    est = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if est.shape != gt.shape:
        raise ValueError(f"estimate has {len(est)} poses, ground truth {len(gt)}")
    dist = path_distances(gt)
    Eg = se2_matrices(gt)
    Ee = se2_matrices(est)
    per_length = {}
    t_all, r_all = [], []
    for L in segment_lengths:
        t_errs, r_errs = [], []
        for i in range(0, len(gt), step):
            j = int(np.searchsorted(dist, dist[i] + L, side="right"))
            if j >= len(gt):
                break
            d_gt = se2_inv(Eg[i]) @ Eg[j]
            d_est = se2_inv(Ee[i]) @ Ee[j]
            err = se2_inv(d_est) @ d_gt
            t_errs.append(np.hypot(err[0, 2], err[1, 2]) / L)
            # planar rotations commute, so the error angle is the wrapped difference of yaw increments
            dyaw = (gt[j, 2] - gt[i, 2]) - (est[j, 2] - est[i, 2])
            r_errs.append(abs(np.arctan2(np.sin(dyaw), np.cos(dyaw))) / L)
        if t_errs:
            per_length[float(L)] = {"translation_pct": float(np.mean(t_errs) * 100.0),
                                    "rotation_deg_per_100m": float(np.degrees(np.mean(r_errs)) * 100.0),
                                    "segments": len(t_errs)}
            t_all += t_errs
            r_all += r_errs
    if not t_all:
        logger.warning("trajectory (%.2f m) is shorter than the smallest segment", dist[-1])
        return OdomErrorReport(0.0, 0.0, {}, 0, True)
    return OdomErrorReport(float(np.mean(t_all) * 100.0), float(np.degrees(np.mean(r_all)) * 100.0),
                           per_length, len(t_all), False)


def endpoint_drift(est, gt) -> float:
    """Final position error after aligning both trajectories at the first frame."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    aligned = align_to_first(est, gt[0])
    return float(np.hypot(*(aligned[-1, :2] - gt[-1, :2])))


# -- point sets ------------------------------------------------------------------------------------

def _points(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a = a.reshape(-1, a.shape[-1] if a.ndim > 1 else 2)
    if len(a) == 0:
        raise ValueError(f"{name} is empty")
    return a


def nearest_distances(A, B) -> np.ndarray:
    """For each point of A, distance to its nearest neighbour in B."""
    A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    idx = cKDTree(B).query(A, k=1)[1]
    d = A - B[idx]
    return np.hypot(d[:, 0], d[:, 1]) if A.shape[1] == 2 else np.linalg.norm(d, axis=1)


def chamfer(A, B) -> float:
    A, B = _points(A, "A"), _points(B, "B")
    return float(0.5 * (nearest_distances(A, B).mean() + nearest_distances(B, A).mean()))


def hausdorff(A, B) -> float:
    A, B = _points(A, "A"), _points(B, "B")
    return float(max(nearest_distances(A, B).max(), nearest_distances(B, A).max()))


def clutter_ratio(points, gt_map, threshold: float = CLUTTER_THRESHOLD) -> float:
    """Fraction of points farther than ``threshold`` (strictly) from the gt map."""
    gt = _points(gt_map, "gt_map")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        logger.warning("clutter ratio of an empty map")
        return 0.0
    return float(np.mean(nearest_distances(points, gt) > threshold))


def rpcdl(points, gt_map, threshold: float = CLUTTER_THRESHOLD) -> float:
    """Fraction of points within ``threshold`` of the gt map."""
    _points(points, "map")
    return 1.0 - clutter_ratio(points, gt_map, threshold)


def map_quality(points, gt_map, threshold: float = CLUTTER_THRESHOLD) -> MapQualityReport:
    gt = _points(gt_map, "gt_map")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        return MapQualityReport(float("nan"), float("nan"), 0.0, 0.0, 0, len(gt), threshold, True)
    cr = clutter_ratio(points, gt, threshold)
    return MapQualityReport(chamfer(points, gt), hausdorff(points, gt), cr, 1.0 - cr, len(points), len(gt), threshold)
