"""Synthetic radar-inertial sequences with ground truth.

Trajectories are planar and parameterised by a curvature profile over arc
length and a speed profile over time, so specific force and yaw rate are
available in closed form. Range-azimuth spectra are rendered as separable
Gaussian splats of each visible reflector with an r⁻⁴ power law, per-pixel
Doppler of the dominant reflector, single-bounce ghosts and log-normal
speckle.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp

from .preintegration import ImuStream
from .velocity import Extrinsics

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
R0 = 1.0  # power normalisation distance, m
GHOST_POWER = 0.3


class SequenceFormatError(ValueError):
    """A sequence directory is malformed."""


@dataclass
class RadarConfig:
    H: int = 128
    W: int = 128
    range_res: float = 0.2
    eta: np.ndarray | None = None
    fov_deg: float = 60.0
    psf_width_range: float = 1.0
    psf_width_azimuth: float = 1.0
    noise_floor: float = 1e-7
    speckle_sigma: float = 0.3
    doppler_noise: float = 0.05
    doppler_res: float = 0.0

    def __post_init__(self):
        if self.eta is None:
            self.eta = np.deg2rad(np.linspace(-self.fov_deg, self.fov_deg, self.W))
        self.eta = np.asarray(self.eta, dtype=np.float64)
        self.validate()

    @property
    def max_range(self) -> float:
        return self.H * self.range_res

    def validate(self) -> None:
        if self.H < 8 or self.W < 2:
            raise ValueError("radar grid too small")
        if len(self.eta) != self.W:
            raise ValueError(f"eta has {len(self.eta)} entries, expected W={self.W}")
        if np.any(np.diff(self.eta) <= 0):
            raise ValueError("eta must be strictly increasing")
        if np.any(np.abs(self.eta) >= np.pi / 2):
            raise ValueError("eta must lie inside (-pi/2, pi/2)")
        if self.range_res <= 0 or self.psf_width_range <= 0 or self.psf_width_azimuth <= 0:
            raise ValueError("range_res and psf widths must be positive")
        if self.noise_floor < 0 or self.speckle_sigma < 0 or self.doppler_noise < 0 or self.doppler_res < 0:
            raise ValueError("noise parameters must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eta"] = [float(x) for x in self.eta]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RadarConfig":
        d = dict(d)
        if d.get("eta") is not None:
            d["eta"] = np.asarray(d["eta"], dtype=np.float64)
        return cls(**d)


@dataclass
class Scene:
    static: np.ndarray  # (M, 3) x, y, reflectivity
    dynamic: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))  # x, y, vx, vy, refl at t=0
    ghost_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.static = np.asarray(self.static, dtype=np.float64).reshape(-1, 3)
        self.dynamic = np.asarray(self.dynamic, dtype=np.float64).reshape(-1, 5)
        if np.any(self.static[:, 2] <= 0) or np.any(self.dynamic[:, 4] <= 0):
            raise ValueError("reflectivity must be positive")
        if not 0 <= self.ghost_rate <= 1:
            raise ValueError("ghost_rate must be a probability")


@dataclass
class Frame:
    t: float
    ras: np.ndarray
    doppler: np.ndarray
    eta: np.ndarray


@dataclass
class Sequence:
    frames: list
    imu: ImuStream
    gt_poses: np.ndarray  # (K, 3) x, y, yaw of the body
    gt_velocity: np.ndarray  # (K, 3) body-frame velocity
    gt_map: np.ndarray  # (M, 2)
    radar: RadarConfig
    extrinsics: Extrinsics = field(default_factory=Extrinsics)
    imu_bias: np.ndarray = field(default_factory=lambda: np.zeros(6))
    radar_rate: float = 10.0
    imu_rate: float = 400.0
    name: str = "sequence"

    @property
    def times(self) -> np.ndarray:
        return np.array([f.t for f in self.frames])

    def __len__(self) -> int:
        return len(self.frames)


# -- trajectories ---------------------------------------------------------------------

@dataclass
class TrajectorySpec:
    kind: str = "line"
    duration: float = 60.0
    speed: float = 1.0
    speed_variation: float = 0.0
    speed_period: float = 20.0
    ramp: float = 0.0
    radius: float = 15.0
    loop_length: float = 60.0
    max_curvature: float = 0.12
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}; choose from {TRAJECTORY_KINDS}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.speed < 0 or not 0 <= self.speed_variation < 1 or self.ramp < 0:
            raise ValueError("invalid speed profile")


TRAJECTORY_KINDS = ("line", "arc", "figure-eight", "random-smooth")
FIGURE_EIGHT_AMPLITUDE = 2.404825557695773  # first zero of J0 closes the loop


def _curvature(spec: TrajectorySpec):
    """Return κ(s) and its antiderivative K(s) with K(0) = 0."""
    if spec.kind == "line":
        return (lambda s: np.zeros_like(np.asarray(s, float))), (lambda s: np.zeros_like(np.asarray(s, float)))
    if spec.kind == "arc":
        k = 1.0 / spec.radius
        return (lambda s: k + 0.0 * np.asarray(s, float)), (lambda s: k * np.asarray(s, float))
    if spec.kind == "figure-eight":
        P = spec.loop_length
        A = FIGURE_EIGHT_AMPLITUDE
        om = 2 * np.pi / P
        return (lambda s: A * om * np.sin(om * np.asarray(s, float))), \
               (lambda s: A * (1.0 - np.cos(om * np.asarray(s, float))))
    rng = np.random.default_rng([spec.seed, 17])
    n = 3
    lam = rng.uniform(15.0, 60.0, n)
    ph = rng.uniform(0, 2 * np.pi, n)
    amp = rng.uniform(0.3, 1.0, n)
    amp *= spec.max_curvature / amp.sum()
    om = 2 * np.pi / lam

    def kappa(s):
        s = np.asarray(s, float)
        return sum(a * np.sin(o * s + p) for a, o, p in zip(amp, om, ph))

    def K(s):
        s = np.asarray(s, float)
        return sum(-a / o * (np.cos(o * s + p) - np.cos(p)) for a, o, p in zip(amp, om, ph))

    return kappa, K


def _speed(spec: TrajectorySpec):
    v0, A, Pv, Tr = spec.speed, spec.speed_variation, spec.speed_period, spec.ramp
    w = 2 * np.pi / Pv

    def ramp(t):
        if Tr <= 0:
            return np.ones_like(t), np.zeros_like(t)
        x = np.clip(t / Tr, 0.0, 1.0)
        r = x * x * (3 - 2 * x)
        dr = np.where((t > 0) & (t < Tr), 6 * x * (1 - x) / Tr, 0.0)
        return r, dr

    def v(t):
        t = np.asarray(t, float)
        r, _ = ramp(t)
        return v0 * r * (1 + A * np.sin(w * t))

    def vdot(t):
        t = np.asarray(t, float)
        r, dr = ramp(t)
        return v0 * (dr * (1 + A * np.sin(w * t)) + r * A * w * np.cos(w * t))

    return v, vdot


@dataclass
class Trajectory:
    frame_times: np.ndarray
    gt_poses: np.ndarray
    gt_velocity: np.ndarray
    yaw_rate: np.ndarray
    imu: ImuStream
    imu_bias: np.ndarray
    path: np.ndarray  # dense (x, y) samples for scene layout


def simulate_trajectory(spec: TrajectorySpec, radar_rate: float = 10.0, imu_rate: float = 400.0,
                        gyro_noise: float = 0.0, accel_noise: float = 0.0,
                        gyro_bias=(0.0, 0.0, 0.0), accel_bias=(0.0, 0.0, 0.0)) -> Trajectory:
    """Ground-truth poses and an IMU stream for a C² planar trajectory.

    Radar frames are stamped half an IMU period off the IMU grid so the two
    clocks never coincide.
    """
    kappa, K = _curvature(spec)
    v, vdot = _speed(spec)

    def rhs(t, y):
        s = y[0]
        th = K(s)
        vt = v(t)
        return [vt, vt * np.cos(th), vt * np.sin(th)]

    n_imu = int(np.floor(spec.duration * imu_rate + 1e-9)) + 1
    t_imu = np.arange(n_imu) / imu_rate
    offset = 0.5 / imu_rate
    n_frames = int(np.floor((t_imu[-1] - offset) * radar_rate + 1e-9)) + 1
    t_frames = offset + np.arange(n_frames) / radar_rate
    t_frames = t_frames[t_frames < t_imu[-1]]
    t_all = np.unique(np.concatenate([t_imu, t_frames]))
    sol = solve_ivp(rhs, (0.0, t_all[-1]), [0.0, 0.0, 0.0], method="DOP853", t_eval=t_all,
                    rtol=1e-12, atol=1e-12)
    if not sol.success:
        raise RuntimeError(f"trajectory integration failed: {sol.message}")
    lookup = {float(t): i for i, t in enumerate(t_all)}
    idx_f = np.array([lookup[float(t)] for t in t_frames])
    idx_i = np.array([lookup[float(t)] for t in t_imu])
    s_all, x_all, y_all = sol.y

    sf = s_all[idx_f]
    poses = np.column_stack([x_all[idx_f], y_all[idx_f], _wrap(K(sf))])
    vf = v(t_frames)
    gt_vel = np.column_stack([vf, np.zeros_like(vf), np.zeros_like(vf)])
    yaw_rate_f = kappa(sf) * vf

    si = s_all[idx_i]
    vi = v(t_imu)
    rng = np.random.default_rng([spec.seed, 3])
    acc = np.column_stack([vdot(t_imu), kappa(si) * vi * vi, np.zeros_like(vi)])
    gyro = np.column_stack([np.zeros_like(vi), np.zeros_like(vi), kappa(si) * vi])
    acc = acc + np.asarray(accel_bias) + accel_noise * rng.standard_normal(acc.shape)
    gyro = gyro + np.asarray(gyro_bias) + gyro_noise * rng.standard_normal(gyro.shape)
    path = np.column_stack([x_all, y_all])
    return Trajectory(t_frames, poses, gt_vel, yaw_rate_f, ImuStream(t_imu, acc, gyro),
                      np.concatenate([accel_bias, gyro_bias]).astype(float), path)


def _wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def make_scene(path: np.ndarray, seed: int = 0, density: float = 0.05, lateral=(1.5, 12.0),
               min_separation: float = 2.0, margin: float = 12.0, n_dynamic: int = 3,
               ghost_rate: float = 0.05) -> Scene:
    """Scatter static reflectors in a corridor around ``path`` plus a few movers."""
    rng = np.random.default_rng([seed, 5])
    lo = path.min(0) - margin
    hi = path.max(0) + margin
    area = float(np.prod(hi - lo))
    n_try = int(rng.poisson(density * area * 4))
    cand = rng.uniform(lo, hi, (n_try, 2))
    sub = path[:: max(1, len(path) // 2000)]
    kept: list = []
    for p in cand:
        d = np.min(np.hypot(*(sub - p).T))
        if d < lateral[0] or d > lateral[1]:
            continue
        if kept and np.min(np.hypot(*(np.asarray(kept) - p).T)) < min_separation:
            continue
        kept.append(p)
    kept = np.asarray(kept).reshape(-1, 2)
    target = int(density * 2 * (lateral[1] - lateral[0]) * (_path_length(path) + 2 * margin))
    kept = kept[: max(target, 4)]
    refl = np.exp(rng.normal(0.0, 0.4, len(kept)))
    static = np.column_stack([kept, refl])
    dyn = []
    for _ in range(n_dynamic):
        anchor = path[rng.integers(len(path))]
        heading = rng.uniform(-np.pi, np.pi)
        speed = rng.uniform(0.6, 1.5)
        start = anchor + rng.uniform(-6, 6, 2)
        dyn.append([start[0], start[1], speed * np.cos(heading), speed * np.sin(heading),
                    float(np.exp(rng.normal(0.3, 0.3)))])
    return Scene(static, np.asarray(dyn).reshape(-1, 5), ghost_rate, seed)


def _path_length(path: np.ndarray) -> float:
    return float(np.sum(np.hypot(*np.diff(path, axis=0).T)))


# -- rendering ----------------------------------------------------------------------------

def _rot2(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def radar_pose(pose, ext: Extrinsics) -> tuple[np.ndarray, float]:
    """World position and heading of the radar for a body pose (x, y, yaw)."""
    x, y, yaw = pose
    pos = np.array([x, y]) + _rot2(yaw) @ ext.lever_arm[:2]
    return pos, yaw + ext.yaw


@dataclass
class Observation:
    """Noise-free view of every scene target from one radar pose."""

    xy: np.ndarray  # (n, 2) radar frame
    range: np.ndarray
    azimuth: np.ndarray
    doppler: np.ndarray
    power: np.ndarray
    visible: np.ndarray
    static: np.ndarray  # True for static landmarks (indices match Scene.static first)


def observe(scene: Scene, pose, body_velocity, yaw_rate: float, config: RadarConfig, t: float = 0.0,
            extrinsics: Extrinsics | None = None) -> Observation:
    ext = extrinsics or Extrinsics()
    pose = np.asarray(pose, dtype=np.float64)
    if not np.isfinite(pose).all():
        raise ValueError("pose must be finite")
    pos_r, yaw_r = radar_pose(pose, ext)
    Rb = _rot2(pose[2])
    # radar velocity in the world: body velocity plus lever-arm sweep
    vb = np.asarray(body_velocity, dtype=np.float64)[:2]
    lever_w = Rb @ ext.lever_arm[:2]
    v_radar = Rb @ vb + yaw_rate * np.array([-lever_w[1], lever_w[0]])
    Rr_T = _rot2(yaw_r).T

    pts = [scene.static[:, :2]]
    vel = [np.zeros((len(scene.static), 2))]
    refl = [scene.static[:, 2]]
    if len(scene.dynamic):
        pts.append(scene.dynamic[:, :2] + t * scene.dynamic[:, 2:4])
        vel.append(scene.dynamic[:, 2:4])
        refl.append(scene.dynamic[:, 4])
    pts = np.vstack(pts)
    vel = np.vstack(vel)
    refl = np.concatenate(refl)
    static = np.arange(len(pts)) < len(scene.static)

    d = (pts - pos_r) @ Rr_T.T
    rng_m = np.hypot(d[:, 0], d[:, 1])
    az = np.arctan2(d[:, 1], d[:, 0])
    rel_v = (vel - v_radar) @ Rr_T.T
    dop = np.einsum("ij,ij->i", d, rel_v) / np.maximum(rng_m, 1e-12)
    power = refl / np.maximum(rng_m / R0, 1e-6) ** 4
    vis = (rng_m > 0) & (rng_m < config.max_range) & (az >= config.eta[0]) & (az <= config.eta[-1])
    return Observation(d, rng_m, az, dop, power, vis, static)


def render_frame(scene: Scene, pose, body_velocity, yaw_rate: float, config: RadarConfig,
                 t: float = 0.0, extrinsics: Extrinsics | None = None,
                 rng: np.random.Generator | None = None) -> Frame:
    """Range-azimuth power and Doppler maps seen from ``pose`` at time ``t``."""
    rng = rng or np.random.default_rng(0)
    ob = observe(scene, pose, body_velocity, yaw_rate, config, t, extrinsics)
    d, power, vis = ob.xy, ob.power, ob.visible
    dop = ob.doppler
    if config.doppler_noise > 0:
        dop = dop + config.doppler_noise * rng.standard_normal(len(dop))

    tr = list(zip(d[vis], power[vis], dop[vis]))
    if scene.ghost_rate > 0 and vis.sum() > 1:
        vi = np.flatnonzero(vis)
        strongest = vi[np.argmax(power[vi])]
        draws = rng.random(len(vi))
        for k, i in enumerate(vi):
            if i == strongest or draws[k] >= scene.ghost_rate:
                continue
            g = 2 * d[strongest] - d[i]
            tr.append((g, GHOST_POWER * power[i], dop[i]))

    H, W = config.H, config.W
    ras = np.zeros((H, W))
    best = np.zeros((H, W))
    doppler = np.zeros((H, W))
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    sr, sa = config.psf_width_range, config.psf_width_azimuth
    for pt, p, dv in tr:
        r = np.hypot(*pt)
        a = np.arctan2(pt[1], pt[0])
        if not (0 < r < config.max_range and config.eta[0] <= a <= config.eta[-1]):
            continue
        ri = r / config.range_res
        aj = np.interp(a, config.eta, np.arange(W))
        splat = p * np.exp(-0.5 * ((rows - ri) / sr) ** 2) * np.exp(-0.5 * ((cols - aj) / sa) ** 2)
        ras += splat
        take = splat > best
        best = np.where(take, splat, best)
        doppler = np.where(take, dv, doppler)
    doppler = np.where(best > config.noise_floor, doppler, 0.0)
    if config.doppler_res > 0:
        doppler = np.round(doppler / config.doppler_res) * config.doppler_res
    if config.speckle_sigma > 0:
        ras = ras * np.exp(config.speckle_sigma * rng.standard_normal((H, W)))
        ras = ras + config.noise_floor * np.exp(config.speckle_sigma * rng.standard_normal((H, W)))
    else:
        ras = ras + config.noise_floor
    return Frame(float(t), ras, doppler, config.eta.copy())


def visible_static(scene: Scene, poses: np.ndarray, config: RadarConfig, ext: Extrinsics,
                   min_range: float = 0.0) -> np.ndarray:
    """Mask of static landmarks inside the field of view of at least one pose."""
    seen = np.zeros(len(scene.static), dtype=bool)
    for pose in poses:
        pos_r, yaw_r = radar_pose(pose, ext)
        d = (scene.static[:, :2] - pos_r) @ _rot2(yaw_r)
        r = np.hypot(d[:, 0], d[:, 1])
        az = np.arctan2(d[:, 1], d[:, 0])
        seen |= (r > min_range) & (r < config.max_range) & (az >= config.eta[0]) & (az <= config.eta[-1])
    return seen


def simulate_sequence(traj: Trajectory, scene: Scene, config: RadarConfig,
                      extrinsics: Extrinsics | None = None, seed: int = 0, threads: int = 1,
                      name: str = "sequence", radar_rate: float = 10.0, imu_rate: float = 400.0) -> Sequence:
    """Render every frame of a trajectory; frame ``k`` uses RNG substream (seed, k)."""
    ext = extrinsics or Extrinsics()

    def one(k):
        return render_frame(scene, traj.gt_poses[k], traj.gt_velocity[k], traj.yaw_rate[k], config,
                            t=traj.frame_times[k], extrinsics=ext,
                            rng=np.random.default_rng([seed, 1000 + k]))

    ks = range(len(traj.frame_times))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            frames = list(pool.map(one, ks))
    else:
        frames = [one(k) for k in ks]
    blind = 6 * config.range_res
    seen = visible_static(scene, traj.gt_poses, config, ext, min_range=blind)
    return Sequence(frames, traj.imu, traj.gt_poses, traj.gt_velocity, scene.static[seen, :2].copy(),
                    config, ext, traj.imu_bias, radar_rate, imu_rate, name)


@dataclass
class SimulationConfig:
    """Everything needed to reproduce one synthetic sequence."""

    kind: str = "figure-eight"
    duration: float = 60.0
    speed: float = 1.0
    speed_variation: float = 0.1
    radius: float = 15.0
    loop_length: float = 60.0
    radar_rate: float = 10.0
    imu_rate: float = 400.0
    gyro_noise: float = 0.002
    accel_noise: float = 0.02
    gyro_bias: tuple = (0.0, 0.0, 2e-4)
    accel_bias: tuple = (0.02, -0.01, 0.0)
    landmark_density: float = 0.05
    n_dynamic: int = 3
    ghost_rate: float = 0.05
    lever_arm: tuple = (0.3, 0.0, 0.0)


def simulate(cfg: SimulationConfig, radar: RadarConfig | None = None, seed: int = 0,
             threads: int = 1) -> Sequence:
    radar = radar or RadarConfig()
    spec = TrajectorySpec(cfg.kind, cfg.duration, cfg.speed, cfg.speed_variation, radius=cfg.radius,
                          loop_length=cfg.loop_length, seed=seed)
    traj = simulate_trajectory(spec, cfg.radar_rate, cfg.imu_rate, cfg.gyro_noise, cfg.accel_noise,
                               cfg.gyro_bias, cfg.accel_bias)
    scene = make_scene(traj.path, seed=seed, density=cfg.landmark_density, n_dynamic=cfg.n_dynamic,
                       ghost_rate=cfg.ghost_rate)
    ext = Extrinsics(np.eye(3), np.asarray(cfg.lever_arm, float))
    return simulate_sequence(traj, scene, radar, ext, seed=seed, threads=threads, name=cfg.kind,
                             radar_rate=cfg.radar_rate, imu_rate=cfg.imu_rate)


def standard_suite(seed: int = 0, duration: float = 60.0, radar: RadarConfig | None = None,
                   threads: int = 1) -> list[Sequence]:
    """The four seeded benchmark sequences: line, arc, figure-eight, random-smooth."""
    out = []
    for i, kind in enumerate(TRAJECTORY_KINDS):
        cfg = SimulationConfig(kind=kind, duration=duration)
        out.append(simulate(cfg, radar, seed=seed * 10 + i, threads=threads))
    return out


# -- sequence directory format --------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv_table(path: Path, header: list) -> np.ndarray:
    """Parse a headed numeric CSV, naming the file and line on failure."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: file not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise SequenceFormatError(f"{path}: empty file, expected header {','.join(header)}") from None
        if [h.strip() for h in got] != header:
            raise SequenceFormatError(f"{path}: line 1: header {got} != expected {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SequenceFormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise SequenceFormatError(f"{path}: line {lineno}: {exc}") from None
    return np.asarray(rows, dtype=np.float64).reshape(-1, len(header))


def write_sequence(seq: Sequence, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "name": seq.name,
        "H": seq.radar.H,
        "W": seq.radar.W,
        "range_res": seq.radar.range_res,
        "eta": [float(x) for x in seq.radar.eta],
        "radar": seq.radar.to_dict(),
        "extrinsics": seq.extrinsics.to_dict(),
        "rates": {"radar": seq.radar_rate, "imu": seq.imu_rate},
        "imu_bias": [float(x) for x in seq.imu_bias],
        "frame_times": [float(f.t) for f in seq.frames],
        "n_frames": len(seq.frames),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    for k, f in enumerate(seq.frames):
        f.ras.astype("<f4").tofile(d / f"ras_{k:05d}.f32")
        f.doppler.astype("<f4").tofile(d / f"dop_{k:05d}.f32")
    _write_csv(d / "imu.csv", ["t", "ax", "ay", "az", "wx", "wy", "wz"],
               np.column_stack([seq.imu.t, seq.imu.acc, seq.imu.gyro]))
    _write_csv(d / "gt_poses.csv", ["t", "x", "y", "yaw"], np.column_stack([seq.times, seq.gt_poses]))
    _write_csv(d / "gt_velocity.csv", ["t", "vx", "vy", "vz"], np.column_stack([seq.times, seq.gt_velocity]))
    _write_csv(d / "gt_map.csv", ["x", "y"], seq.gt_map)
    return d


def _read_matrix(path: Path, H: int, W: int) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"{path}: file not found")
    expected = H * W * 4
    size = os.path.getsize(path)
    if size != expected:
        raise SequenceFormatError(f"{path}: expected {expected} bytes ({H}x{W} float32), "
                                  f"found {size}; data ends at byte offset {size}")
    return np.fromfile(path, dtype="<f4").astype(np.float64).reshape(H, W)


def read_sequence(directory) -> Sequence:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    meta_path = d / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{meta_path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise SequenceFormatError(f"{meta_path}: invalid JSON at offset {exc.pos}: {exc.msg}") from None
    for key in ("H", "W", "range_res", "eta", "extrinsics", "frame_times"):
        if key not in meta:
            raise SequenceFormatError(f"{meta_path}: missing key {key!r}")
    radar_d = dict(meta.get("radar", {}))
    radar_d.update(H=meta["H"], W=meta["W"], range_res=meta["range_res"], eta=meta["eta"])
    try:
        radar = RadarConfig.from_dict(radar_d)
    except (TypeError, ValueError) as exc:
        raise SequenceFormatError(f"{meta_path}: {exc}") from None
    H, W = radar.H, radar.W
    frames = []
    for k, t in enumerate(meta["frame_times"]):
        ras = _read_matrix(d / f"ras_{k:05d}.f32", H, W)
        dop = _read_matrix(d / f"dop_{k:05d}.f32", H, W)
        frames.append(Frame(float(t), ras, dop, radar.eta.copy()))
    imu = read_csv_table(d / "imu.csv", ["t", "ax", "ay", "az", "wx", "wy", "wz"])
    poses = read_csv_table(d / "gt_poses.csv", ["t", "x", "y", "yaw"])
    vel_path = d / "gt_velocity.csv"
    vel = read_csv_table(vel_path, ["t", "vx", "vy", "vz"]) if vel_path.exists() else np.zeros((len(frames), 4))
    gmap = read_csv_table(d / "gt_map.csv", ["x", "y"])
    if len(poses) != len(frames):
        raise SequenceFormatError(f"{d / 'gt_poses.csv'}: {len(poses)} poses for {len(frames)} frames")
    rates = meta.get("rates", {})
    return Sequence(frames, ImuStream(imu[:, 0], imu[:, 1:4], imu[:, 4:7]), poses[:, 1:4], vel[:, 1:4],
                    gmap, radar, Extrinsics.from_dict(meta["extrinsics"]),
                    np.asarray(meta.get("imu_bias", np.zeros(6)), float),
                    float(rates.get("radar", 10.0)), float(rates.get("imu", 400.0)), meta.get("name", d.name))
