import csv

import numpy as np
import pytest

from rasio.evaluation import endpoint_drift
from rasio.pipeline import (MODES, NumericalError, OdometryConfig, PlateauScheduler, S3EModel, TrainConfig,
                            TrajectoryEstimate, build_map, chain, detection_support, kabsch_2d, load_model,
                            load_train_state, pair_inputs, pair_losses, run_odometry, se2_compose, se2_inverse,
                            select_pairs, train, voxel_dedup, wrap_angle, write_trajectory)
from rasio.simulator import RadarConfig, SimulationConfig, simulate
from rasio.velocity import Extrinsics

QUIET_SIM = dict(gyro_noise=0.0, accel_noise=0.0, gyro_bias=(0, 0, 0), accel_bias=(0, 0, 0), n_dynamic=0,
                 ghost_rate=0.0, speed_variation=0.0)
QUIET_RADAR = RadarConfig(H=64, W=64, range_res=0.4, speckle_sigma=0.0, doppler_noise=0.0)


def tiny_cfg(**kw):
    base = dict(epochs=1, n_landmarks=8, desc_dim=16, channels=(4, 4, 4), batch_pairs=2, pairs_per_epoch=4)
    base.update(kw)
    return TrainConfig(**base)


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# -- training ---------------------------------------------------------------------------------

def test_one_epoch_smoke(tmp_path, short_seq):
    ck, log = tmp_path / "m.bin", tmp_path / "loss.csv"
    st = train([short_seq], tiny_cfg(), checkpoint=ck, loss_log=log)
    assert len(st.history) == 1
    rows = read_rows(log)
    assert rows[0] == ["epoch", "L1", "L2", "L3", "total", "lr"] and len(rows) == 2
    model = load_model(ck)
    for k, v in st.model.state_dict().items():
        assert np.array_equal(model.state_dict()[k], v)


def test_training_is_deterministic(short_seq):
    a = train([short_seq], tiny_cfg(epochs=2))
    b = train([short_seq], tiny_cfg(epochs=2))
    assert a.history == b.history


def test_resume_continues_numbering(tmp_path, short_seq):
    ck, log = tmp_path / "m.bin", tmp_path / "loss.csv"
    train([short_seq], tiny_cfg(), checkpoint=ck, loss_log=log)
    st = load_train_state(ck)
    assert st.epoch == 1 and st.optimizer.state.step > 0
    train([short_seq], state=st, checkpoint=ck, loss_log=log, epochs=1)
    assert [r[0] for r in read_rows(log)[1:]] == ["1", "2"]
    # resumed run equals an uninterrupted two-epoch run
    full = train([short_seq], tiny_cfg(epochs=2))
    assert np.allclose([r[1:] for r in st.history], [r[1:] for r in full.history], rtol=1e-12)


def test_pair_losses_finite_and_differentiable(short_seq):
    model = S3EModel(tiny_cfg())
    r = pair_losses(model, short_seq, pair_inputs(short_seq, 3, model.config))
    assert all(np.isfinite(x.item()) and x.item() >= 0 for x in (r.L1, r.L2, r.L3))
    from rasio import tensor as T
    T.backward(r.L1 + r.L2 * 0.05 + r.L3 * 0.1)
    assert np.abs(model.params["net.loc.gain"].grad).sum() > 0
    assert np.abs(model.params["bias.fc3.w"].grad).sum() > 0


def test_nan_loss_aborts_with_pair_id(short_seq, monkeypatch):
    import rasio.pipeline as pl

    def boom(*a, **k):
        raise FloatingPointError("nan in softmax")
    monkeypatch.setattr(pl, "pair_losses", boom)
    with pytest.raises(NumericalError, match=r"arc\[0\]:\d+"):
        train([short_seq], tiny_cfg())


def test_select_pairs_subset_is_seeded(short_seq):
    cfg = tiny_cfg(pairs_per_epoch=5)
    a = select_pairs([short_seq, short_seq], cfg)
    assert a == select_pairs([short_seq, short_seq], cfg) and len(a) == 5
    assert len(select_pairs([short_seq], tiny_cfg(pairs_per_epoch=0))) == len(short_seq) - 1


def test_plateau_scheduler():
    s = PlateauScheduler(1e-3, factor=0.5, patience=2, min_lr=2e-4)
    s.step(1.0)
    for _ in range(2):
        s.step(1.0)
    assert s.lr == 1e-3  # patience not yet exceeded
    s.step(1.0)
    assert s.lr == 5e-4
    for _ in range(6):
        s.step(1.0)
    assert s.lr == 2e-4
    s.step(0.5)
    assert s.bad_epochs == 0


def test_train_config_validation():
    for bad in (dict(epochs=0), dict(lr=0.0), dict(rho=-1.0), dict(n_landmarks=2)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- odometry ------------------------------------------------------------------------------------

def test_static_sequence_stays_at_origin():
    seq = simulate(SimulationConfig(kind="line", duration=2.0, speed=0.0, **QUIET_SIM), QUIET_RADAR, seed=1)
    for mode, model in (("imu_only", None), ("s3e", S3EModel(TrainConfig(n_landmarks=32)))):
        tr = run_odometry(seq, model, OdometryConfig(mode=mode))
        assert np.abs(tr.poses).max() <= 1e-6, mode


def test_straight_line_endpoint():
    seq = simulate(SimulationConfig(kind="line", duration=20.0, speed=1.0, **QUIET_SIM), QUIET_RADAR, seed=2)
    tr = run_odometry(seq, S3EModel(TrainConfig(n_landmarks=32)), OdometryConfig(mode="s3e"))
    assert not tr.flags.any()
    assert endpoint_drift(tr.poses, seq.gt_poses) < 0.2


def test_odometry_modes_and_threads(short_seq):
    model = S3EModel(tiny_cfg(n_landmarks=16))
    one = run_odometry(short_seq, model, OdometryConfig(mode="s3e_kabsch"))
    two = run_odometry(short_seq, model, OdometryConfig(mode="s3e_kabsch", threads=2))
    assert np.array_equal(one.poses, two.poses)
    assert len(one) == len(short_seq) and one.poses.shape == (len(short_seq), 3)
    with pytest.raises(ValueError):
        run_odometry(short_seq, None, OdometryConfig(mode="s3e"))
    with pytest.raises(ValueError):
        OdometryConfig(mode="lidar")
    assert MODES == ("imu_only", "s3e", "s3e_kabsch")


def test_detection_support_requires_doppler(short_seq):
    m = pair_inputs(short_seq, 0, tiny_cfg()).mask_k
    sup = detection_support(short_seq, 0, m)
    assert sup.any() and not (sup & (m.M == 0)).any()


# -- geometry helpers and maps ----------------------------------------------------------------

def test_se2_helpers():
    a = np.array([1.0, 2.0, 0.5])
    assert np.allclose(se2_compose(a, se2_inverse(a)), 0.0, atol=1e-15)
    assert np.allclose(chain([[1, 0, np.pi / 2], [1, 0, 0]]), [[0, 0, 0], [1, 0, np.pi / 2], [1, 1, np.pi / 2]])
    assert wrap_angle(-np.pi) == np.pi and wrap_angle(3 * np.pi) == pytest.approx(np.pi)


def test_kabsch_recovers_transform():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(10, 2))
    c, s = np.cos(0.3), np.sin(0.3)
    R = np.array([[c, -s], [s, c]])
    t = np.array([0.5, -1.0])
    R2, t2 = kabsch_2d(P, P @ R.T + t)
    assert np.allclose(R2, R, atol=1e-12) and np.allclose(t2, t, atol=1e-12)


def make_traj(poses, landmarks, ext=None):
    n = len(poses)
    return TrajectoryEstimate(np.arange(n) * 0.1, np.asarray(poses, float), np.zeros((n, 3)), landmarks,
                              np.zeros(n, bool), "s3e", ext or Extrinsics())


def test_map_of_single_frame():
    lm = np.array([[3.0, 1.0], [5.0, -2.0]])
    ext = Extrinsics(np.eye(3), [0.3, 0.0, 0.0])
    assert np.allclose(build_map(make_traj([[0, 0, 0]], [lm], ext)), lm + [0.3, 0.0])


def test_map_copies_coincide_under_translation():
    world = np.array([[6.0, 2.0]])
    traj = make_traj([[0, 0, 0], [1, 0, 0]], [world, world - [1.0, 0.0]])
    pts = build_map(traj)
    assert np.allclose(pts[0], pts[1], atol=1e-12)
    assert len(voxel_dedup(pts, 0.2)) == 1


def test_write_trajectory_round_trip(tmp_path):
    traj = make_traj([[0, 0, 0], [0.1, 0.2, 0.3]], [np.zeros((0, 2))] * 2)
    write_trajectory(tmp_path / "t.csv", traj)
    rows = read_rows(tmp_path / "t.csv")
    assert rows[0] == ["t", "x", "y", "yaw"]
    assert float(rows[2][3]) == 0.3
