"""Training loop, odometry and map building.

Training needs no pose labels: each consecutive frame pair is fused,
passed through the extractor, associated, and scored by the three
self-supervised losses. Inference chains IMU rotations with a translation
patched by the Doppler velocity, which RANSAC distils from static
landmarks.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from . import velocity as vel
from .extractor import (ExtractorConfig, ExtractorNet, LandmarkSet, associate, detect, load_checkpoint,
                        pixel_to_cartesian, save_checkpoint)
from .fusion import FusionParams, SoftMask, cross_fuse, preprocess, rotation_transport
from .losses import (LossComponents, LossWeights, combine, geometry_loss, kinematic_loss, patched_translation,
                     velocity_alignment_loss)
from .preintegration import Bias, BiasRegressor, ImuStream, imu_features, preintegrate, quat_to_rotmat_np, yaw_delta
from .simulator import Sequence
from .tensor import Tensor

logger = logging.getLogger(__name__)

MODES = ("imu_only", "s3e", "s3e_kabsch")


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 120
    lr: float = 1e-4
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-6
    batch_pairs: int = 2
    pairs_per_epoch: int = 0  # 0: every pair
    seed: int = 0
    lambda1: float = 0.05
    lambda2: float = 0.1
    kappa: float = 0.01
    rho: float = 0.3
    threshold_ratio: float = 0.8
    n_landmarks: int = 64
    nms_radius: float = 6.0
    peaks_only: bool = False
    patch_size: int = 5
    channels: tuple = (8, 16, 32)
    desc_dim: int = 248
    bias_hidden: int = 32
    bias_scale: tuple = (0.1, 0.01)
    rotate_initial_velocity: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_pairs < 1 or self.pairs_per_epoch < 0:
            raise ValueError("batch_pairs must be positive and pairs_per_epoch non-negative")
        if not 0 < self.plateau_factor < 1 or self.plateau_patience < 0 or self.min_lr < 0:
            raise ValueError("invalid plateau scheduler settings")
        self.channels = tuple(self.channels)
        self.bias_scale = tuple(self.bias_scale)
        self.fusion()  # validates kappa, rho, threshold_ratio
        self.extractor()
        LossWeights(self.lambda1, self.lambda2)

    def fusion(self) -> FusionParams:
        return FusionParams(self.kappa, self.rho, self.threshold_ratio)

    def extractor(self) -> ExtractorConfig:
        return ExtractorConfig(self.channels, desc_dim=self.desc_dim, n_landmarks=self.n_landmarks,
                               nms_radius=self.nms_radius, peaks_only=self.peaks_only,
                               patch_size=self.patch_size,
                               kappa_subpixel=self.kappa, kappa_assoc=self.kappa, seed=self.seed)

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["bias_scale"] = list(self.bias_scale)
        return d


class S3EModel:
    """Extractor network plus the IMU bias regressor."""

    def __init__(self, config: TrainConfig | None = None):
        self.config = config or TrainConfig()
        self.net = ExtractorNet(self.config.extractor())
        self.bias = BiasRegressor(self.config.bias_hidden, seed=self.config.seed, scale=self.config.bias_scale)

    @property
    def params(self) -> dict:
        out = {"net." + k: v for k, v in self.net.params.items()}
        out.update(self.bias.params)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"checkpoint lacks parameter {k!r}")
            if state[k].shape != p.shape:
                raise ValueError(f"parameter {k!r}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)


# -- shared per-pair quantities ---------------------------------------------------------------

@dataclass
class PairInputs:
    k: int
    window: ImuStream
    theta: float
    mask_k: SoftMask
    mask_k1: SoftMask


def frame_mask(seq: Sequence, k: int, cfg: TrainConfig) -> SoftMask:
    f = seq.frames[k]
    return preprocess(f.ras, seq.radar.eta, seq.radar.range_res, k, threshold_ratio=cfg.threshold_ratio)


def imu_window(seq: Sequence, k: int) -> ImuStream:
    return seq.imu.window(seq.frames[k].t, seq.frames[k + 1].t)


def imu_yaw(window: ImuStream) -> float:
    """Yaw increment from zero-bias pre-integration; the transport never sees gradients."""
    with T.no_grad():
        return yaw_delta(preintegrate(window))


def pair_inputs(seq: Sequence, k: int, cfg: TrainConfig, masks: dict | None = None) -> PairInputs:
    masks = {} if masks is None else masks
    for j in (k, k + 1):
        if j not in masks:
            masks[j] = frame_mask(seq, j, cfg)
    w = imu_window(seq, k)
    return PairInputs(k, w, imu_yaw(w), masks[k], masks[k + 1])


def doppler_support(seq: Sequence, k: int, shape: tuple) -> np.ndarray:
    """Upsampled cells whose nearest native cell carries a Doppler return.

    The Doppler map is zero wherever no target rises above the noise floor;
    such cells say nothing about ego motion, and enough of them would make
    zero velocity the consensus.
    """
    d = seq.frames[k].doppler != 0
    H, W = d.shape
    rows = np.rint(np.linspace(0, H - 1, shape[0])).astype(int)
    cols = np.rint(np.linspace(0, W - 1, shape[1])).astype(int)
    return d[np.ix_(rows, cols)]


def detection_support(seq: Sequence, k: int, mask: SoftMask) -> np.ndarray:
    """Cells of the unfused mask that also carry Doppler.

    A radar at rest sees zero Doppler everywhere; the whole mask is then the
    support and the velocity solve correctly returns zero.
    """
    lit = mask.M > 0
    sup = lit & doppler_support(seq, k, mask.M.shape)
    return sup if sup.any() else lit


def native_coords(uv, seq: Sequence, mask: SoftMask):
    """Upsampled pixel coordinates mapped back onto the native Doppler grid."""
    H, W = seq.radar.H, seq.radar.W
    Hu, Wu = mask.M.shape
    scale = np.array([(H - 1) / (Hu - 1), (W - 1) / (Wu - 1)])
    return T._as_tensor(uv) * scale


def radar3(v2) -> Tensor:
    v2 = T._as_tensor(v2)
    return T.concat([v2, Tensor(np.zeros(1))])


def gyro_at(stream: ImuStream, t: float) -> np.ndarray:
    return stream.at(t)[1]


@dataclass
class PairObservation:
    """Landmark correspondences and Doppler data of one frame pair."""

    p: object  # N×2 radar positions in frame k
    q: object  # N×2 matched positions in frame k+1
    c: object  # N credibilities
    az_k: object
    dop_k: object
    az_k1: object  # landmarks detected in frame k+1
    dop_k1: object


@dataclass
class PairResult:
    L1: Tensor
    L2: Tensor
    L3: Tensor
    skipped: bool
    v_k: np.ndarray


def losses_from_observation(obs: PairObservation, window: ImuStream, bias: Bias, ext: vel.Extrinsics,
                            rotate_initial_velocity: bool = False, model: S3EModel | None = None,
                            pair_id: str = "") -> PairResult:
    """L1, L2 and L3 for one pair given landmarks, Dopplers and IMU data.

    If ``model`` is given its bias regressor replaces ``bias``. Pairs whose
    Doppler geometry is degenerate contribute nothing to L2 and L3 and fall
    back to zero initial velocity in L1.
    """
    zero = Tensor(0.0)
    skipped = False
    try:
        G_k = vel.bearing_matrix(T._as_tensor(obs.az_k))
        B_k = -T._as_tensor(obs.dop_k)
        G_k1 = vel.bearing_matrix(T._as_tensor(obs.az_k1))
        B_k1 = -T._as_tensor(obs.dop_k1)
        vr_k = vel.lsq_solve(G_k, B_k)
        vr_k1 = vel.lsq_solve(G_k1, B_k1)
        L2 = kinematic_loss(G_k, B_k) + kinematic_loss(G_k1, B_k1)
    except vel.DegenerateGeometryError as exc:
        logger.warning("pair %s: %s; kinematic terms skipped", pair_id, exc)
        skipped = True
        vr_k = vr_k1 = None
        L2 = zero
    if model is not None:
        ego = np.zeros(2) if vr_k is None else vr_k.data
        bias = model.bias(imu_features(window, ego))
    pre = preintegrate(window, bias)
    R = pre.rotation
    bw = T._as_tensor(bias.bw)
    if skipped:
        v_body_k = Tensor(np.zeros(3))
        L3 = zero
    else:
        w_k = T._as_tensor(gyro_at(window, window.t[0])) - bw
        w_k1 = T._as_tensor(gyro_at(window, window.t[-1])) - bw
        v_body_k = vel.radar_to_body_velocity(radar3(vr_k), w_k, ext)
        v_body_k1 = vel.radar_to_body_velocity(radar3(vr_k1), w_k1, ext)
        L3 = velocity_alignment_loss(v_body_k, pre.dv, R, v_body_k1)
    t_disp = patched_translation(v_body_k, pre.dp, pre.dt_total, pre.rotations, pre.dts,
                                 rotate_initial_velocity=rotate_initial_velocity)
    L1 = geometry_loss(obs.p, obs.q, obs.c, R, t_disp, ext)
    return PairResult(L1, L2, L3, skipped, v_body_k.data.copy())


def pair_losses(model: S3EModel, seq: Sequence, inputs: PairInputs, pair_id: str = "") -> PairResult:
    """Network forward pass and losses for one frame pair (no RANSAC)."""
    cfg = model.config
    ecfg = model.net.config
    Mk, Mk1 = cross_fuse(inputs.mask_k, inputs.mask_k1, inputs.theta, cfg.fusion())
    fk = model.net(Mk)
    fk1 = model.net(Mk1)
    k = inputs.k
    lm = detect(fk, ecfg, seq.radar.H, support=detection_support(seq, k, inputs.mask_k))
    # each frame's ego velocity comes from its own landmarks; association
    # only supplies the geometric correspondences
    lm1 = detect(fk1, ecfg, seq.radar.H, support=detection_support(seq, k + 1, inputs.mask_k1))
    uv1 = associate(lm.descriptors, fk1.D, kappa=ecfg.kappa_assoc)
    q, _ = pixel_to_cartesian(uv1, Mk1.eta, Mk1.range_res)
    dop_k = vel.subpixel_doppler(seq.frames[k].doppler, native_coords(lm.uv, seq, Mk), cfg.kappa)
    dop_k1 = vel.subpixel_doppler(seq.frames[k + 1].doppler, native_coords(lm1.uv, seq, Mk1), cfg.kappa)
    obs = PairObservation(lm.positions, q, lm.credibility, lm.azimuth, dop_k, lm1.azimuth, dop_k1)
    return losses_from_observation(obs, inputs.window, Bias(), seq.extrinsics, cfg.rotate_initial_velocity,
                                   model=model, pair_id=pair_id)


# -- training ----------------------------------------------------------------------------------

@dataclass
class PlateauScheduler:
    """Halve the learning rate when the monitored loss stops improving."""

    lr: float
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-6
    threshold: float = 1e-4
    best: float = float("inf")
    bad_epochs: int = 0

    def step(self, value: float) -> float:
        if value < self.best * (1.0 - self.threshold):
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                new = max(self.lr * self.factor, self.min_lr)
                if new < self.lr:
                    logger.info("plateau: lr %.3g -> %.3g", self.lr, new)
                self.lr = new
                self.bad_epochs = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best if np.isfinite(self.best) else None, "bad_epochs": self.bad_epochs}

    def load(self, d: dict) -> None:
        self.lr = float(d["lr"])
        self.best = float("inf") if d.get("best") is None else float(d["best"])
        self.bad_epochs = int(d["bad_epochs"])


@dataclass
class TrainState:
    model: S3EModel
    optimizer: T.Adam
    scheduler: PlateauScheduler
    epoch: int = 0
    history: list = field(default_factory=list)  # rows (epoch, L1, L2, L3, total, lr)


def select_pairs(sequences: list, cfg: TrainConfig) -> list[tuple[int, int]]:
    pairs = [(s, k) for s, seq in enumerate(sequences) for k in range(len(seq) - 1)]
    if not pairs:
        raise ValueError("training needs at least one frame pair")
    if cfg.pairs_per_epoch and cfg.pairs_per_epoch < len(pairs):
        rng = np.random.default_rng([cfg.seed, 7])
        idx = np.sort(rng.choice(len(pairs), cfg.pairs_per_epoch, replace=False))
        pairs = [pairs[i] for i in idx]
    return pairs


def new_train_state(cfg: TrainConfig) -> TrainState:
    model = S3EModel(cfg)
    opt = T.Adam(model.parameters(), lr=cfg.lr)
    return TrainState(model, opt, PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr))


def train_epoch(state: TrainState, sequences: list, pairs: list, cache: dict) -> tuple:
    cfg = state.model.config
    order = np.random.default_rng([cfg.seed, 13, state.epoch]).permutation(len(pairs))
    sums = np.zeros(4)
    state.optimizer.lr = state.scheduler.lr
    for start in range(0, len(order), cfg.batch_pairs):
        batch = [pairs[i] for i in order[start: start + cfg.batch_pairs]]
        state.optimizer.zero_grad()
        parts = []
        for s, k in batch:
            pid = f"{sequences[s].name}[{s}]:{k}"
            key = (s, k)
            if key not in cache:
                cache[key] = pair_inputs(sequences[s], k, cfg, cache.setdefault(("masks", s), {}))
            try:
                r = pair_losses(state.model, sequences[s], cache[key], pid)
            except FloatingPointError as exc:
                raise NumericalError(f"non-finite value on pair {pid}: {exc}") from None
            parts.append((r.L1, r.L2, r.L3))
        comp = combine(parts, cfg.weights())
        vals = comp.values()
        if not np.isfinite(vals).all():
            raise NumericalError(f"non-finite loss on pairs {batch}")
        try:
            T.backward(comp.total)
        except FloatingPointError as exc:
            raise NumericalError(f"non-finite gradient on pairs {batch}: {exc}") from None
        state.optimizer.step()
        sums += np.array(vals)
    return tuple(sums / len(pairs))


def write_loss_csv(path, history: list, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["epoch", "L1", "L2", "L3", "total", "lr"])
        for row in history:
            w.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])


def train(sequences: list, cfg: TrainConfig | None = None, state: TrainState | None = None,
          checkpoint: str | Path | None = None, loss_log: str | Path | None = None,
          epochs: int | None = None) -> TrainState:
    """Run ``epochs`` more epochs (default ``cfg.epochs``) on the sequences."""
    if not sequences:
        raise ValueError("training needs at least one sequence")
    if state is None:
        state = new_train_state(cfg or TrainConfig())
    cfg = state.model.config
    pairs = select_pairs(sequences, cfg)
    cache: dict = {}
    n = cfg.epochs if epochs is None else epochs
    fresh_log = state.epoch == 0
    for _ in range(n):
        state.epoch += 1
        means = train_epoch(state, sequences, pairs, cache)
        lr_used = state.optimizer.lr
        state.scheduler.step(means[3])
        row = (state.epoch,) + tuple(means) + (lr_used,)
        state.history.append(row)
        logger.info("epoch %d: L1 %.4g L2 %.4g L3 %.4g total %.4g", *row[:5])
        if loss_log is not None:
            write_loss_csv(loss_log, [row], append=not fresh_log)
            fresh_log = False
        if checkpoint is not None:
            save_train_state(state, checkpoint)
    return state


def save_train_state(state: TrainState, path) -> Path:
    arrays = dict(state.model.state_dict())
    names = list(state.model.params)
    opt = state.optimizer.state
    if opt.m:
        for name, m, v in zip(names, opt.m, opt.v):
            arrays["adam.m/" + name] = m
            arrays["adam.v/" + name] = v
    meta = {"epoch": state.epoch, "config": state.model.config.to_dict(), "adam_step": opt.step,
            "scheduler": state.scheduler.state(),
            "history": [[int(r[0])] + [float(x) for x in r[1:]] for r in state.history]}
    return save_checkpoint(path, arrays, meta)


def load_train_state(path) -> TrainState:
    arrays, man = load_checkpoint(path)
    try:
        cfg = TrainConfig(**man["config"])
    except (TypeError, KeyError, ValueError) as exc:
        raise ValueError(f"{path}: incompatible checkpoint configuration: {exc}") from None
    state = new_train_state(cfg)
    state.model.load_state_dict(arrays)
    names = list(state.model.params)
    if ("adam.m/" + names[0]) in arrays:
        state.optimizer.state = T.AdamState(int(man["adam_step"]), [arrays["adam.m/" + n] for n in names],
                                            [arrays["adam.v/" + n] for n in names])
    state.scheduler.load(man["scheduler"])
    state.epoch = int(man["epoch"])
    state.history = [tuple(r) for r in man.get("history", [])]
    return state


def load_model(path) -> S3EModel:
    return load_train_state(path).model


# -- odometry --------------------------------------------------------------------------------

@dataclass
class FrameVelocity:
    velocity: np.ndarray | None  # radar-frame planar velocity
    landmarks: np.ndarray  # inlier positions, radar frame, n×2
    bearings: np.ndarray
    dopplers: np.ndarray
    uv: np.ndarray
    descriptors: np.ndarray | None
    all_dynamic: bool = False


@dataclass
class TrajectoryEstimate:
    times: np.ndarray
    poses: np.ndarray  # K×3 (x, y, yaw) relative to the first frame
    velocities: np.ndarray  # K×3 body frame
    landmarks: list  # per frame, inlier positions in the radar frame
    flags: np.ndarray  # True where the step fell back to IMU propagation
    mode: str = "s3e"
    extrinsics: vel.Extrinsics = field(default_factory=vel.Extrinsics)

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class OdometryConfig:
    mode: str = "s3e"
    seed: int = 0
    ransac_iters: int = 200
    inlier_tol: float = 0.15
    min_inliers: int = 4
    kabsch_gate: float = 0.5
    kabsch_min_pairs: int = 6
    threads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown odometry mode {self.mode!r}; choose from {MODES}")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        vel.RansacParams(self.ransac_iters, self.inlier_tol, self.min_inliers)

    def ransac(self) -> vel.RansacParams:
        return vel.RansacParams(self.ransac_iters, self.inlier_tol, self.min_inliers)


def wrap_angle(a):
    """Wrap to (−π, π]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def se2_compose(a, b) -> np.ndarray:
    """Pose ``a`` followed by the relative motion ``b`` (both x, y, yaw)."""
    c, s = np.cos(a[2]), np.sin(a[2])
    return np.array([a[0] + c * b[0] - s * b[1], a[1] + s * b[0] + c * b[1], float(wrap_angle(a[2] + b[2]))])


def se2_inverse(a) -> np.ndarray:
    c, s = np.cos(a[2]), np.sin(a[2])
    return np.array([-c * a[0] - s * a[1], s * a[0] - c * a[1], -a[2]])


def chain(steps) -> np.ndarray:
    poses = [np.zeros(3)]
    for st in steps:
        poses.append(se2_compose(poses[-1], st))
    return np.asarray(poses)


def fused_mask(seq: Sequence, k: int, masks: list, thetas: list, params: FusionParams) -> SoftMask:
    """Frame ``k`` enhanced by its predecessor (frame 0 by its successor)."""
    m = masks[k]
    if len(masks) == 1 or params.rho == 0:
        return m
    if k == 0:
        extra = rotation_transport(masks[1].M, -thetas[0], params.kappa, m.eta)
    else:
        extra = rotation_transport(masks[k - 1].M, thetas[k - 1], params.kappa, m.eta)
    return SoftMask(m.M + params.rho * extra, m.eta, m.range_res, k)


def frame_velocity(model: S3EModel, seq: Sequence, mask: SoftMask, k: int, ocfg: OdometryConfig,
                   need_descriptors: bool = False, support: np.ndarray | None = None) -> FrameVelocity:
    with T.no_grad():
        feat = model.net(mask)
        lm = detect(feat, model.net.config, seq.radar.H, support=support)
        dop = vel.subpixel_doppler(seq.frames[k].doppler, native_coords(lm.uv, seq, mask), model.config.kappa).data
        desc = lm.descriptors.data if need_descriptors else None
        pos = lm.positions.data
        az = lm.azimuth.data
        try:
            inl, sol = vel.ransac_static(az, dop, ocfg.ransac(), seed=ocfg.seed * 1_000_003 + k)
        except (vel.AllDynamicError, vel.DegenerateGeometryError, ValueError) as exc:
            logger.warning("frame %d: %s; falling back to IMU propagation", k, exc)
            return FrameVelocity(None, np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros((0, 2)), None, True)
        return FrameVelocity(np.asarray(sol.vector), pos[inl], az[inl], dop[inl], lm.uv.data[inl],
                             None if desc is None else desc[inl], False)


def kabsch_2d(P: np.ndarray, Q: np.ndarray, w: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted rigid alignment: R, t minimising Σ w‖R p + t − q‖²."""
    P = np.asarray(P, float)
    Q = np.asarray(Q, float)
    w = np.ones(len(P)) if w is None else np.asarray(w, float)
    w = w / w.sum()
    mp, mq = w @ P, w @ Q
    Hm = ((P - mp) * w[:, None]).T @ (Q - mq)
    U, _, Vt = np.linalg.svd(Hm)
    D = np.diag([1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, mq - R @ mp


def run_odometry(seq: Sequence, model: S3EModel | None = None, config: OdometryConfig | None = None) -> TrajectoryEstimate:
    """Chain per-pair relative poses into a trajectory in the first frame."""
    ocfg = config or OdometryConfig()
    mode = ocfg.mode
    if mode != "imu_only" and model is None:
        raise ValueError(f"mode {mode!r} needs a trained model")
    K = len(seq)
    ext = seq.extrinsics
    windows = [imu_window(seq, k) for k in range(K - 1)]
    thetas = [imu_yaw(w) for w in windows]

    per_frame: list = [None] * K
    if mode != "imu_only":
        tcfg = model.config
        masks = [frame_mask(seq, k, tcfg) for k in range(K)]
        fparams = tcfg.fusion()

        def one(k):
            m = fused_mask(seq, k, masks, thetas, fparams)
            return frame_velocity(model, seq, m, k, ocfg, need_descriptors=(mode == "s3e_kabsch"),
                                  support=detection_support(seq, k, masks[k])), m

        if ocfg.threads > 1:
            with ThreadPoolExecutor(max_workers=ocfg.threads) as pool:
                results = list(pool.map(one, range(K)))
        else:
            results = [one(k) for k in range(K)]
        per_frame = [r[0] for r in results]
        fused = [r[1] for r in results]

    steps, velocities, flags = [], [], []
    v_state = np.zeros(3)
    for k in range(K):
        fv = per_frame[k]
        if mode != "imu_only" and not fv.all_dynamic:
            w0 = seq.imu.at(seq.frames[k].t)[1]
            bw = np.zeros(3)
            if K > 1:
                with T.no_grad():
                    bw = model.bias(imu_features(windows[min(k, K - 2)], fv.velocity)).numpy()[3:]
            v_state = vel.radar_to_body_velocity(np.r_[fv.velocity, 0.0], w0 - bw, ext)
            flags.append(False)
        else:
            flags.append(mode != "imu_only")
        velocities.append(v_state.copy())
        if k == K - 1:
            break
        with T.no_grad():
            bias = Bias()
            if mode != "imu_only":
                ego = fv.velocity if fv.velocity is not None else np.zeros(2)
                bias = model.bias(imu_features(windows[k], ego))
            pre = preintegrate(windows[k], bias)
        R = pre.rotation.data
        t_disp = v_state * pre.dt_total + pre.dp.data
        if model is not None and model.config.rotate_initial_velocity:
            t_disp = patched_translation(v_state, pre.dp, rotations=pre.rotations, dts=pre.dts,
                                         rotate_initial_velocity=True).data
        dyaw = float(np.arctan2(R[1, 0], R[0, 0]))
        if mode == "s3e_kabsch" and not fv.all_dynamic and not per_frame[k + 1].all_dynamic:
            refined = kabsch_refine(model, fv, fused[k + 1], seq, k, R, t_disp, ext, ocfg)
            if refined is not None:
                dyaw, t_disp = refined
        steps.append(np.array([t_disp[0], t_disp[1], dyaw]))
        # velocity carried to the next frame for IMU-only propagation
        v_state = R.T @ (v_state + pre.dv.data)
    poses = chain(steps)
    return TrajectoryEstimate(seq.times.copy(), poses, np.asarray(velocities), [
        (fv.landmarks if fv is not None else np.zeros((0, 2))) for fv in per_frame],
        np.asarray(flags, dtype=bool), mode, ext)


def kabsch_refine(model, fv: FrameVelocity, mask_k1: SoftMask, seq: Sequence, k: int, R: np.ndarray,
                  t_disp: np.ndarray, ext: vel.Extrinsics, ocfg: OdometryConfig):
    """Planar rigid fit of inlier landmarks to their matches in the next frame.

    The fit replaces the IMU step only if enough matches agree with the IMU
    prediction within ``kabsch_gate`` metres.
    """
    from .losses import transfer_points

    if len(fv.landmarks) < ocfg.kabsch_min_pairs:
        return None
    with T.no_grad():
        feat = model.net(mask_k1)
        uv1 = associate(fv.descriptors, feat.D, kappa=model.config.kappa)
        q, _ = pixel_to_cartesian(uv1, mask_k1.eta, mask_k1.range_res)
        pred = transfer_points(fv.landmarks, R, t_disp, ext).data
    q = q.data
    good = np.hypot(*(pred - q).T) < ocfg.kabsch_gate
    if good.sum() < ocfg.kabsch_min_pairs:
        return None
    # radar frame k -> radar frame k+1 in body coordinates
    P = (fv.landmarks[good] @ ext.R[:2, :2].T) + ext.lever_arm[:2]
    Q = (q[good] @ ext.R[:2, :2].T) + ext.lever_arm[:2]
    Rk, tk = kabsch_2d(P, Q)
    # Q = Rk P + tk  with Rk = ΔRᵀ, tk = −ΔRᵀ t  =>  ΔR = Rkᵀ, t = −Rkᵀ tk
    dyaw = float(np.arctan2(Rk[0, 1], Rk[0, 0]))
    t2 = -Rk.T @ tk
    return dyaw, np.array([t2[0], t2[1], t_disp[2]])


def build_map(traj: TrajectoryEstimate, voxel: float | None = None) -> np.ndarray:
    """All inlier landmarks in the first frame, optionally voxel-deduplicated."""
    ext = traj.extrinsics
    pts = []
    for pose, lm in zip(traj.poses, traj.landmarks):
        if len(lm) == 0:
            continue
        body = lm @ ext.R[:2, :2].T + ext.lever_arm[:2]
        c, s = np.cos(pose[2]), np.sin(pose[2])
        pts.append(body @ np.array([[c, s], [-s, c]]) + pose[:2])
    out = np.vstack(pts) if pts else np.zeros((0, 2))
    if voxel:
        out = voxel_dedup(out, voxel)
    return out


def voxel_dedup(points: np.ndarray, voxel: float = 0.2) -> np.ndarray:
    if len(points) == 0:
        return points
    keys = np.floor(points / voxel).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(uniq), 2))
    np.add.at(sums, inv, points)
    counts = np.bincount(inv, minlength=len(uniq))
    return sums / counts[:, None]


def write_trajectory(path, traj: TrajectoryEstimate) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "yaw"])
        for t, p in zip(traj.times, traj.poses):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in p])


def write_map(path, points: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y"])
        for p in points:
            w.writerow([repr(float(p[0])), repr(float(p[1]))])
