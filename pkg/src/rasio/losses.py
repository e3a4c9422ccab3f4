"""Self-supervised losses: landmark geometry, Doppler kinematics and
velocity alignment, plus their weighted total.

Landmarks live in the radar plane, so geometry residuals are 2-vectors.
Measurement noise is taken as isotropic, which makes the Mahalanobis form a
credibility-weighted Euclidean one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .velocity import Extrinsics, lsq_solve

logger = logging.getLogger(__name__)

NORM_EPS = 1e-30


@dataclass
class LossWeights:
    lambda1: float = 0.05
    lambda2: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def safe_norm(x: Tensor) -> Tensor:
    """Euclidean norm with a tiny floor so the gradient exists at zero."""
    return T.sqrt(T.square(x).sum() + NORM_EPS)


def patched_translation(v_k, dp, dt_total: float | None = None, rotations=None, dts=None,
                        rotate_initial_velocity: bool = False) -> Tensor:
    """Displacement over one radar interval, in the body frame at its start.

    Pre-integration starts from rest, so the initial velocity contributes
    ``v_k·T``. With ``rotate_initial_velocity`` the velocity is instead
    carried along the orientation path and integrated by the mid-point rule,
    ``Σ ½(R_i + R_{i+1})·v_k·dt_i``; that form describes a body whose
    body-frame velocity stays constant and double-counts the centripetal
    term already present in ``dp``.
    """
    v_k = T._as_tensor(v_k)
    dp = T._as_tensor(dp)
    if rotate_initial_velocity:
        if rotations is None or dts is None:
            raise ValueError("the rotated form needs the orientation path and step sizes")
        acc = None
        for i, dt in enumerate(dts):
            Rm = (T._as_tensor(rotations[i]) + T._as_tensor(rotations[i + 1])) * (0.5 * dt)
            step = T.matmul(Rm, v_k)
            acc = step if acc is None else acc + step
        return dp if acc is None else acc + dp
    if dt_total is None:
        dt_total = float(np.sum(dts))
    return v_k * dt_total + dp


def radar_to_body_points(p, ext: Extrinsics) -> Tensor:
    """Planar radar points (N×2) as 3-D body-frame points."""
    p = T._as_tensor(p)
    p3 = T.concat([p, Tensor(np.zeros((p.shape[0], 1)))], axis=1)
    return T.matmul(p3, ext.R.T) + ext.lever_arm


def body_to_radar_points(P, ext: Extrinsics) -> Tensor:
    P = T._as_tensor(P)
    return T.matmul(P - ext.lever_arm, ext.R)[:, 0:2]


def transfer_points(p, R_delta, t_disp, ext: Extrinsics) -> Tensor:
    """Map radar points of frame k into radar frame k+1.

    ``R_delta`` rotates body k+1 into body k and ``t_disp`` is the body
    displacement in frame k, so ``R_k^{k+1} = R_deltaᵀ`` and
    ``t_k^{k+1} = −R_deltaᵀ·t_disp``.
    """
    P = radar_to_body_points(p, ext)
    R_delta = T._as_tensor(R_delta)
    t_disp = T._as_tensor(t_disp)
    P1 = T.matmul(P - t_disp, R_delta)  # rows: (R_deltaᵀ (P − t))ᵀ
    return body_to_radar_points(P1, ext)


def geometry_residuals(p, q, R_delta, t_disp, ext: Extrinsics) -> Tensor:
    return transfer_points(p, R_delta, t_disp, ext) - T._as_tensor(q)


def geometry_loss(p, q, c, R_delta, t_disp, ext: Extrinsics | None = None) -> Tensor:
    """½ Σ c_i ‖R p_i + t − q_i‖² for one frame pair."""
    ext = ext or Extrinsics()
    p = T._as_tensor(p)
    if p.shape[0] == 0:
        logger.warning("geometry loss on an empty pair list")
        return Tensor(0.0)
    e = geometry_residuals(p, q, R_delta, t_disp, ext)
    return 0.5 * (T._as_tensor(c) * T.square(e).sum(axis=1)).sum()


def kinematic_loss(G, B) -> Tensor:
    """‖G(GᵀG)⁻¹GᵀB − B‖, the part of B outside the column space of G."""
    G, B = T._as_tensor(G), T._as_tensor(B)
    X = lsq_solve(G, B)
    return safe_norm(T.matmul(G, X) - B)


def velocity_alignment_loss(v_k, dv, R_delta, v_k1) -> Tensor:
    """‖v_k + Δv − R·v_{k+1}‖ with all velocities as body-frame 3-vectors."""
    r = T._as_tensor(v_k) + T._as_tensor(dv) - T.matmul(T._as_tensor(R_delta), T._as_tensor(v_k1))
    return safe_norm(r)


def total_loss(L1, L2, L3, weights: LossWeights | None = None) -> Tensor:
    w = weights or LossWeights()
    return T._as_tensor(L1) + T._as_tensor(L2) * w.lambda1 + T._as_tensor(L3) * w.lambda2


@dataclass
class LossComponents:
    L1: Tensor
    L2: Tensor
    L3: Tensor
    total: Tensor
    skipped: list = field(default_factory=list)

    def values(self) -> tuple[float, float, float, float]:
        return (float(self.L1.data), float(self.L2.data), float(self.L3.data), float(self.total.data))


def combine(parts: list, weights: LossWeights | None = None) -> LossComponents:
    """Sum per-pair (L1, L2, L3) triples in a fixed order."""
    L1 = L2 = L3 = Tensor(0.0)
    for a, b, c in parts:
        L1, L2, L3 = L1 + a, L2 + b, L3 + c
    return LossComponents(L1, L2, L3, total_loss(L1, L2, L3, weights))
