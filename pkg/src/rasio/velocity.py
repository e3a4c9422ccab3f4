"""Doppler-based ego-velocity: sub-pixel Doppler lookup, the lever-arm
transfer between body and radar frames, least-squares velocity and RANSAC
distillation of static landmarks.

Sign convention: a static landmark at bearing α seen from a radar moving
with velocity v reports Doppler ``-v·(cos α, sin α)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e8


class DegenerateGeometryError(ValueError):
    """Bearings do not constrain both velocity components."""


class AllDynamicError(RuntimeError):
    """No RANSAC hypothesis gathered enough static landmarks."""


@dataclass
class Extrinsics:
    """Radar mounting: rotation radar→IMU and radar position in the IMU frame."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.lever_arm = np.asarray(self.lever_arm, dtype=np.float64).reshape(3)
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9) or np.linalg.det(self.R) < 0:
            raise ValueError("extrinsic rotation must be orthonormal with det +1")

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.R[1, 0], self.R[0, 0]))

    def to_dict(self) -> dict:
        return {"R_RI": [float(x) for x in self.R.reshape(-1)],
                "lever_arm": [float(x) for x in self.lever_arm]}

    @classmethod
    def from_dict(cls, d: dict) -> "Extrinsics":
        return cls(np.array(d["R_RI"]).reshape(3, 3), np.array(d["lever_arm"]))


@dataclass
class VelocitySolution:
    velocity: object  # radar-frame planar velocity, Tensor or ndarray (2,)
    residuals: np.ndarray
    inlier_mask: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return self.velocity.data if isinstance(self.velocity, Tensor) else np.asarray(self.velocity)

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.vector))

    @property
    def heading(self) -> float:
        v = self.vector
        return float(np.arctan2(v[1], v[0]))


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]], dtype=np.float64)


def body_to_radar_velocity(v_body, omega, ext: Extrinsics):
    """Radar-frame velocity from body velocity and angular rate (lever-arm sweep)."""
    if isinstance(v_body, Tensor) or isinstance(omega, Tensor):
        # ω × l = -[l]× ω
        sweep = T.matmul(-_skew(ext.lever_arm), T._as_tensor(omega))
        return T.matmul(ext.R.T, T._as_tensor(v_body) + sweep)
    return ext.R.T @ (np.asarray(v_body, float) + np.cross(np.asarray(omega, float), ext.lever_arm))


def radar_to_body_velocity(v_radar, omega, ext: Extrinsics):
    """Inverse of :func:`body_to_radar_velocity`."""
    if isinstance(v_radar, Tensor) or isinstance(omega, Tensor):
        sweep = T.matmul(-_skew(ext.lever_arm), T._as_tensor(omega))
        return T.matmul(ext.R, T._as_tensor(v_radar)) - sweep
    return ext.R @ np.asarray(v_radar, float) - np.cross(np.asarray(omega, float), ext.lever_arm)


# -- sub-pixel Doppler -------------------------------------------------------------

def subpixel_doppler(doppler_map: np.ndarray, coords, kappa: float = 0.01, window: int = 9) -> Tensor:
    """Softmax-weighted Doppler around each sub-pixel coordinate (row, col).

    Weights are ``softmax(-Δ²/κ)`` over squared pixel distance, evaluated on a
    ``window``×``window`` neighbourhood of the nearest pixel.
    """
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    coords = T._as_tensor(coords)
    H, W = doppler_map.shape
    half = window // 2
    centre = np.rint(coords.data).astype(int)
    off = np.arange(-half, half + 1)
    rows = centre[:, :1] + np.repeat(off, window)[None, :]
    cols = centre[:, 1:] + np.tile(off, window)[None, :]
    valid = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    rows_c = np.clip(rows, 0, H - 1)
    cols_c = np.clip(cols, 0, W - 1)
    values = doppler_map[rows_c, cols_c] * valid
    du = coords[:, 0:1] - rows_c.astype(np.float64)
    dv = coords[:, 1:2] - cols_c.astype(np.float64)
    logits = -(T.square(du) + T.square(dv)) + np.where(valid, 0.0, -1e30)
    weights = T.softmax(logits, axis=1, temperature=kappa)
    return (weights * values).sum(axis=1)


def subpixel_doppler_full(doppler_map: np.ndarray, coords: np.ndarray, kappa: float = 0.01) -> np.ndarray:
    """Full-support evaluation of the same weighting (reference path)."""
    H, W = doppler_map.shape
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    out = []
    for u, v in np.asarray(coords, float):
        w = T.softmax_array(-((rr - u) ** 2 + (cc - v) ** 2).ravel(), temperature=kappa)
        out.append(float(w @ doppler_map.ravel()))
    return np.array(out)


# -- least squares -------------------------------------------------------------------

def bearing_matrix(bearings):
    """Rows (cos α, sin α). Accepts angles (N,) or direction vectors (N, 2)."""
    if isinstance(bearings, Tensor):
        if bearings.ndim == 2:
            return bearings / T.sqrt(T.square(bearings).sum(axis=1, keepdims=True))
        return T.stack([T.cos(bearings), T.sin(bearings)], axis=1)
    b = np.asarray(bearings, dtype=np.float64)
    if b.ndim == 2:
        return b / np.linalg.norm(b, axis=1, keepdims=True)
    return np.stack([np.cos(b), np.sin(b)], axis=1)


def _normal_matrix_check(G: np.ndarray) -> None:
    if G.shape[0] < 2:
        raise DegenerateGeometryError("need at least two bearings")
    ev = np.linalg.eigvalsh(G.T @ G)
    if ev[0] <= 0 or ev[-1] / ev[0] > MAX_CONDITION:
        raise DegenerateGeometryError(f"normal matrix condition number {ev[-1] / max(ev[0], 1e-300):.3g} "
                                      f"exceeds {MAX_CONDITION:g}")


def lsq_solve(G, B):
    """X = (GᵀG)⁻¹GᵀB via the closed-form 2×2 inverse; differentiable for tensors."""
    if isinstance(G, Tensor) or isinstance(B, Tensor):
        G, B = T._as_tensor(G), T._as_tensor(B)
        _normal_matrix_check(G.data)
        N = T.matmul(G.T, G)
        a, b, c, d = N[0, 0], N[0, 1], N[1, 0], N[1, 1]
        det = a * d - b * c
        inv = T.stack([T.stack([d, -b]), T.stack([-c, a])]) / det
        return T.matmul(inv, T.matmul(G.T, B))
    G = np.asarray(G, float)
    B = np.asarray(B, float)
    _normal_matrix_check(G)
    N = G.T @ G
    inv = np.array([[N[1, 1], -N[0, 1]], [-N[1, 0], N[0, 0]]]) / (N[0, 0] * N[1, 1] - N[0, 1] * N[1, 0])
    return inv @ (G.T @ B)


def solve_ego_velocity(bearings, dopplers) -> VelocitySolution:
    """Planar radar velocity from landmark bearings and their Doppler velocities."""
    G = bearing_matrix(bearings)
    if isinstance(dopplers, Tensor) or isinstance(G, Tensor):
        B = -T._as_tensor(dopplers)
        X = lsq_solve(G, B)
        res = G.data @ X.data - B.data
    else:
        B = -np.asarray(dopplers, dtype=np.float64)
        X = lsq_solve(G, B)
        res = G @ X - B
    return VelocitySolution(X, res, np.ones(len(res), dtype=bool))


@dataclass
class RansacParams:
    iters: int = 200
    inlier_tol: float = 0.15
    min_inliers: int = 4


def ransac_static(bearings, dopplers, params: RansacParams | None = None, seed: int = 0) -> tuple[np.ndarray, VelocitySolution]:
    """Two-point RANSAC over the Doppler velocity model; refits on the consensus set."""
    params = params or RansacParams()
    G = bearing_matrix(np.asarray(bearings.data if isinstance(bearings, Tensor) else bearings, float))
    B = -np.asarray(dopplers.data if isinstance(dopplers, Tensor) else dopplers, float)
    n = len(B)
    if n < params.min_inliers:
        raise ValueError(f"{n} landmarks is fewer than min_inliers={params.min_inliers}")
    rng = np.random.default_rng(seed)
    best_mask, best_cost = None, (np.inf, np.inf)
    for _ in range(params.iters):
        i, j = rng.choice(n, 2, replace=False)
        g = G[[i, j]]
        det = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
        if abs(det) < 1e-3:
            continue
        X = np.linalg.solve(g, B[[i, j]])
        res = np.abs(G @ X - B)
        mask = res <= params.inlier_tol
        cost = (-mask.sum(), res[mask].sum())
        if cost < best_cost:
            best_mask, best_cost = mask, cost
    if best_mask is None or best_mask.sum() < params.min_inliers:
        raise AllDynamicError("no hypothesis reached the minimum inlier count")
    mask = best_mask
    for _ in range(2):
        try:
            X = lsq_solve(G[mask], B[mask])
        except DegenerateGeometryError:
            break
        new_mask = np.abs(G @ X - B) <= params.inlier_tol
        if new_mask.sum() < params.min_inliers or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    X = lsq_solve(G[mask], B[mask])
    return mask, VelocitySolution(X, G @ X - B, mask)
