"""Soft masks and rotation-based cross fusion of adjacent spectra.

A yaw change between two frames moves every static reflector along the
azimuth axis. Transporting each column of one mask to where the other frame
should see it, and adding the result at a small scale, reinforces structure
that is consistent with the IMU rotation while leaving clutter and ghosts
unreinforced.

The temperature acts on squared angular distance in rad². With the default
0.01 and 0.47° bins the attention spreads over roughly 24 columns; retune it
for other fields of view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import bilinear_matrix, softmax_array

BLIND_BINS = 6


@dataclass
class FusionParams:
    kappa: float = 0.01
    rho: float = 0.3
    threshold_ratio: float = 0.8

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.rho >= 0:
            raise ValueError("rho must be non-negative")
        if not 0 < self.threshold_ratio < 2:
            raise ValueError("threshold_ratio must lie in (0, 2)")


@dataclass
class SoftMask:
    M: np.ndarray
    eta: np.ndarray
    range_res: float
    frame: int = 0

    @property
    def shape(self) -> tuple:
        return self.M.shape


def column_threshold(M: np.ndarray, ratio: float = 0.8) -> np.ndarray:
    """Per-column ``ratio × mean`` over nonzero entries (0 for empty columns)."""
    nz = M != 0
    cnt = nz.sum(axis=0)
    tot = np.where(nz, M, 0.0).sum(axis=0)
    mean = np.divide(tot, cnt, out=np.zeros(M.shape[1]), where=cnt > 0)
    return ratio * mean


def blind_rows(H: int, Ho: int, blind_bins: int = BLIND_BINS) -> int:
    return int(np.ceil(blind_bins * Ho / H - 1e-9))


def preprocess(ras: np.ndarray, eta: np.ndarray, range_res: float, frame: int = 0,
               out_shape: tuple | None = None, threshold_ratio: float = 0.8,
               blind_bins: int = BLIND_BINS) -> SoftMask:
    """Blank the near-range bins, upsample 2× bilinearly and drop speckle.

    Upsampling is corner-aligned, so the range resolution of the output is
    ``range_res·(H−1)/(H'−1)``.
    """
    ras = np.asarray(ras, dtype=np.float64)
    if ras.ndim != 2:
        raise ValueError("ras must be a 2-D matrix")
    if np.any(ras < 0) or not np.isfinite(ras).all():
        raise ValueError("ras must be finite and non-negative")
    H, W = ras.shape
    Ho, Wo = out_shape or (2 * H, 2 * W)
    x = ras.copy()
    x[:blind_bins] = 0.0
    M = bilinear_matrix(H, Ho) @ x @ bilinear_matrix(W, Wo).T
    # the blanked band scales with the upsampling factor (6 native -> 12 rows);
    # interpolation would otherwise bleed row 6 into rows 11 and below
    M[: blind_rows(H, Ho, blind_bins)] = 0.0
    M[M < 0] = 0.0
    thr = column_threshold(M, threshold_ratio)
    M = np.where(M < thr[None, :], 0.0, M)
    eta_up = np.interp(np.linspace(0.0, W - 1, Wo), np.arange(W), np.asarray(eta, float))
    rr = range_res * (H - 1) / (Ho - 1)
    return SoftMask(M, eta_up, rr, frame)


def attention_matrix(eta: np.ndarray, theta: float, kappa: float) -> np.ndarray:
    """A[m, j] = softmax_j(−(η_j − ϑ − η_m)²/κ); rows sum to one."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    if not np.isfinite(theta):
        raise ValueError("rotation must be finite")
    eta = np.asarray(eta, dtype=np.float64)
    logits = -((eta[None, :] - theta - eta[:, None]) ** 2)
    return softmax_array(logits, axis=1, temperature=kappa)


def rotation_transport(M, theta: float, kappa: float = 0.01, eta: np.ndarray | None = None) -> np.ndarray:
    """Columns of ``M`` moved by the yaw ``theta``: returns ``M·Aᵀ``."""
    if isinstance(M, SoftMask):
        eta = M.eta if eta is None else eta
        M = M.M
    if eta is None:
        raise ValueError("azimuth bin centres are required")
    fov = eta[-1] - eta[0]
    if abs(theta) >= fov:
        raise ValueError(f"|rotation| {abs(theta):.3g} rad exceeds the azimuth span {fov:.3g} rad")
    return np.asarray(M, float) @ attention_matrix(eta, theta, kappa).T


def cross_fuse(Mk: SoftMask, Mk1: SoftMask, theta: float, params: FusionParams | None = None) -> tuple[SoftMask, SoftMask]:
    """Enhance both masks with the other one transported by ±theta.

    ``theta`` is the yaw from frame k to frame k+1. The fused result is
    ``M + ρ·transport`` for each direction.
    """
    params = params or FusionParams()
    if Mk.M.shape != Mk1.M.shape or not np.array_equal(Mk.eta, Mk1.eta):
        raise ValueError(f"mask shapes differ: {Mk.M.shape} vs {Mk1.M.shape}")
    if params.rho == 0:
        return (SoftMask(Mk.M.copy(), Mk.eta, Mk.range_res, Mk.frame),
                SoftMask(Mk1.M.copy(), Mk1.eta, Mk1.range_res, Mk1.frame))
    fwd = rotation_transport(Mk.M, theta, params.kappa, Mk.eta)
    bwd = rotation_transport(Mk1.M, -theta, params.kappa, Mk.eta)
    return (SoftMask(Mk.M + params.rho * bwd, Mk.eta, Mk.range_res, Mk.frame),
            SoftMask(Mk1.M + params.rho * fwd, Mk1.eta, Mk1.range_res, Mk1.frame))
