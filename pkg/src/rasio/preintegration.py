"""Inter-frame IMU pre-integration and the learned bias regressor.

Quaternions are Hamilton, ordered (w, x, y, z), body-to-reference. The
specific force is assumed gravity-compensated, so no gravity term appears.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

GYRO_SANITY = 50.0
BIAS_SANITY = 1.0


@dataclass(frozen=True)
class ImuSample:
    t: float
    acc: tuple
    gyro: tuple


@dataclass
class ImuStream:
    """Time-ordered IMU samples stored column-wise."""

    t: np.ndarray
    acc: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.acc = np.asarray(self.acc, dtype=np.float64).reshape(-1, 3)
        self.gyro = np.asarray(self.gyro, dtype=np.float64).reshape(-1, 3)
        if not (len(self.t) == len(self.acc) == len(self.gyro)):
            raise ValueError("IMU columns have different lengths")

    @classmethod
    def from_samples(cls, samples) -> "ImuStream":
        samples = list(samples)
        return cls([s.t for s in samples], [s.acc for s in samples], [s.gyro for s in samples])

    def __len__(self) -> int:
        return len(self.t)

    def samples(self) -> list[ImuSample]:
        return [ImuSample(float(t), tuple(a), tuple(w)) for t, a, w in zip(self.t, self.acc, self.gyro)]

    def validate(self) -> None:
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")
        if not (np.isfinite(self.acc).all() and np.isfinite(self.gyro).all()):
            raise ValueError("IMU sample contains non-finite values")
        if np.any(np.linalg.norm(self.gyro, axis=1) >= GYRO_SANITY):
            raise ValueError(f"angular rate exceeds {GYRO_SANITY} rad/s sanity bound")

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Linearly interpolated (acc, gyro) at time ``t``."""
        acc = np.array([np.interp(t, self.t, self.acc[:, i]) for i in range(3)])
        gyro = np.array([np.interp(t, self.t, self.gyro[:, i]) for i in range(3)])
        return acc, gyro

    def window(self, t0: float, t1: float) -> "ImuStream":
        """Samples inside (t0, t1) with interpolated samples added at both ends."""
        if not t1 > t0:
            raise ValueError("window end must follow its start")
        if t0 < self.t[0] or t1 > self.t[-1]:
            raise ValueError(f"IMU stream [{self.t[0]}, {self.t[-1]}] does not span [{t0}, {t1}]")
        inside = (self.t > t0) & (self.t < t1)
        a0, w0 = self.at(t0)
        a1, w1 = self.at(t1)
        return ImuStream(np.concatenate([[t0], self.t[inside], [t1]]),
                         np.vstack([a0, self.acc[inside], a1]),
                         np.vstack([w0, self.gyro[inside], w1]))


@dataclass
class Bias:
    """Accelerometer and gyroscope biases; arrays or tensors of length 3."""

    ba: object = field(default_factory=lambda: np.zeros(3))
    bw: object = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("ba", "bw"):
            v = getattr(self, name)
            arr = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
            if arr.shape != (3,):
                raise ValueError(f"bias {name} must have shape (3,)")
            if not np.isfinite(arr).all():
                raise ValueError(f"bias {name} is not finite")
            if np.any(np.abs(arr) >= BIAS_SANITY):
                raise ValueError(f"bias {name} exceeds sanity bound {BIAS_SANITY}")
            if not isinstance(v, Tensor):
                setattr(self, name, arr)

    def numpy(self) -> np.ndarray:
        ba = self.ba.data if isinstance(self.ba, Tensor) else self.ba
        bw = self.bw.data if isinstance(self.bw, Tensor) else self.bw
        return np.concatenate([ba, bw])


@dataclass
class Preintegrated:
    """Increments of position, velocity and orientation between two frames,
    expressed in the body frame of the first one."""

    dp: Tensor
    dv: Tensor
    dq: Tensor
    dt_total: float
    frames: tuple = (0, 1)
    bias: Bias | None = None
    # rotation path R_t^k at every sample and the sample spacing, used by
    # quadrature of rotated quantities over the interval
    rotations: list = field(default_factory=list, repr=False)
    dts: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def rotation(self) -> Tensor:
        return quat_to_rotmat(self.dq)


# -- quaternion algebra on tensors -----------------------------------------------

def _left_basis() -> np.ndarray:
    # L(q) = sum_i q_i E_i with q ⊗ p = L(q) p
    e = np.zeros((4, 4, 4))
    sign_idx = [
        # row, col, component, sign
        (0, 0, 0, 1), (0, 1, 1, -1), (0, 2, 2, -1), (0, 3, 3, -1),
        (1, 0, 1, 1), (1, 1, 0, 1), (1, 2, 3, -1), (1, 3, 2, 1),
        (2, 0, 2, 1), (2, 1, 3, 1), (2, 2, 0, 1), (2, 3, 1, -1),
        (3, 0, 3, 1), (3, 1, 2, -1), (3, 2, 1, 1), (3, 3, 0, 1),
    ]
    for r, c, comp, s in sign_idx:
        e[comp, r, c] = s
    return e.reshape(4, 16)


def _rot_basis() -> np.ndarray:
    # R_flat = vec(q q^T) @ basis, quadratic form of the unit quaternion
    b = np.zeros((4, 4, 9))

    def put(entry, terms):
        for (i, j), c in terms.items():
            b[i, j, entry] += c

    w, x, y, z = range(4)
    put(0, {(w, w): 1, (x, x): 1, (y, y): -1, (z, z): -1})
    put(1, {(x, y): 2, (w, z): -2})
    put(2, {(x, z): 2, (w, y): 2})
    put(3, {(x, y): 2, (w, z): 2})
    put(4, {(w, w): 1, (x, x): -1, (y, y): 1, (z, z): -1})
    put(5, {(y, z): 2, (w, x): -2})
    put(6, {(x, z): 2, (w, y): -2})
    put(7, {(y, z): 2, (w, x): 2})
    put(8, {(w, w): 1, (x, x): -1, (y, y): -1, (z, z): 1})
    return b.reshape(16, 9)


_LEFT = _left_basis()
_ROT = _rot_basis()


def quat_mul(q, p) -> Tensor:
    q, p = T._as_tensor(q), T._as_tensor(p)
    return T.matmul(T.matmul(q, _LEFT).reshape(4, 4), p)


def quat_to_rotmat(q) -> Tensor:
    q = T._as_tensor(q)
    outer = T.matmul(q.reshape(4, 1), q.reshape(1, 4)).reshape(16)
    return T.matmul(outer, _ROT).reshape(3, 3)


def quat_to_rotmat_np(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return (np.outer(q, q).reshape(16) @ _ROT).reshape(3, 3)


def quat_from_yaw(yaw: float) -> np.ndarray:
    return np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])


# -- pre-integration ----------------------------------------------------------------

def preintegrate(samples, bias: Bias | None = None, frames: tuple = (0, 1)) -> Preintegrated:
    """Mid-point pre-integration of the samples spanning one radar interval.

    The quaternion is advanced by ``q ⊗ [1, ½ω̄dt]`` and renormalised each
    step; the specific force of both step ends is rotated into the start
    frame and averaged. Bias tensors carry gradients into all increments.
    """
    stream = samples if isinstance(samples, ImuStream) else ImuStream.from_samples(samples)
    if len(stream) < 2:
        raise ValueError("pre-integration needs at least two IMU samples")
    stream.validate()
    bias = bias or Bias()
    ba = T._as_tensor(bias.ba)
    bw = T._as_tensor(bias.bw)

    t, acc, gyro = stream.t, stream.acc, stream.gyro
    dts = np.diff(t)
    q = Tensor(np.array([1.0, 0.0, 0.0, 0.0]))
    dp = Tensor(np.zeros(3))
    dv = Tensor(np.zeros(3))
    R = Tensor(np.eye(3))
    rotations = [R]
    one = Tensor(np.ones(1))
    a_prev = acc[0] - ba
    for i, dt in enumerate(dts):
        w_mid = (0.5 * (gyro[i] + gyro[i + 1])) - bw
        dq_step = T.concat([one, w_mid * (0.5 * dt)])
        q_new = quat_mul(q, dq_step)
        q_new = q_new / T.sqrt(T.square(q_new).sum())
        R_new = quat_to_rotmat(q_new)
        a_next = acc[i + 1] - ba
        a_mid = (T.matmul(R, a_prev) + T.matmul(R_new, a_next)) * 0.5
        dp = dp + dv * dt + a_mid * (0.5 * dt * dt)
        dv = dv + a_mid * dt
        q, R, a_prev = q_new, R_new, a_next
        rotations.append(R)
    return Preintegrated(dp, dv, q, float(t[-1] - t[0]), tuple(frames), bias, rotations, dts)


def yaw_delta(pre: Preintegrated | Tensor | np.ndarray) -> float:
    """Heading change (z-axis Euler angle) of the orientation increment."""
    q = pre.dq if isinstance(pre, Preintegrated) else pre
    w, x, y, z = (q.data if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64))
    s = 2.0 * (w * y - z * x)
    if abs(s) > np.sin(np.deg2rad(89.0)):
        raise ValueError("yaw undefined near ±90° pitch")
    return float(np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z)))


# -- bias regressor -----------------------------------------------------------------

N_FEATURES = 15


def imu_features(window: ImuStream, ego_velocity) -> np.ndarray:
    """Mean and variance of specific force and angular rate, plus ego velocity."""
    v = np.zeros(3)
    ego = np.asarray(ego_velocity, dtype=np.float64).reshape(-1)
    v[: len(ego)] = ego
    return np.concatenate([window.acc.mean(0), window.acc.var(0),
                           window.gyro.mean(0), window.gyro.var(0), v])


class BiasRegressor:
    """Three fully connected layers (32, 32, 6) regressing IMU biases.

    The last layer starts at zero so the initial bias estimate is zero; the
    output passes through ``scale * tanh`` to stay inside the sanity bound.
    """

    def __init__(self, hidden: int = 32, seed: int = 0, scale: tuple = (BIAS_SANITY, BIAS_SANITY)):
        rng = np.random.default_rng(seed)
        self.scale = (float(scale[0]), float(scale[1]))
        if not (0 < self.scale[0] <= BIAS_SANITY and 0 < self.scale[1] <= BIAS_SANITY):
            raise ValueError("bias scale must lie in (0, 1]")
        self.params = {
            "bias.fc1.w": Tensor(rng.normal(0, np.sqrt(2.0 / N_FEATURES), (N_FEATURES, hidden)), True),
            "bias.fc1.b": Tensor(np.zeros(hidden), True),
            "bias.fc2.w": Tensor(rng.normal(0, np.sqrt(2.0 / hidden), (hidden, hidden)), True),
            "bias.fc2.b": Tensor(np.zeros(hidden), True),
            "bias.fc3.w": Tensor(np.zeros((hidden, 6)), True),
            "bias.fc3.b": Tensor(np.zeros(6), True),
        }

    def __call__(self, features) -> Bias:
        p = self.params
        h = T.relu(T.matmul(T._as_tensor(features), p["bias.fc1.w"]) + p["bias.fc1.b"])
        h = T.relu(T.matmul(h, p["bias.fc2.w"]) + p["bias.fc2.b"])
        z = T.tanh(T.matmul(h, p["bias.fc3.w"]) + p["bias.fc3.b"])
        # tanh keeps |b| <= scale; scale < 1 avoids touching the open bound
        ba = z[0:3] * (self.scale[0] * (1 - 1e-9))
        bw = z[3:6] * (self.scale[1] * (1 - 1e-9))
        return Bias(ba, bw)


def bias_regressor(imu_window: ImuStream, ego_velocity, model: BiasRegressor) -> Bias:
    return model(imu_features(imu_window, ego_velocity))
