import json

import numpy as np
import pytest

from rasio.simulator import (TRAJECTORY_KINDS, RadarConfig, Scene, SequenceFormatError, TrajectorySpec, observe,
                             read_sequence, render_frame, simulate_trajectory, write_sequence)
from rasio.velocity import Extrinsics

QUIET = dict(speckle_sigma=0.0, doppler_noise=0.0, noise_floor=0.0)


def bin_of(cfg, r, az):
    return int(round(r / cfg.range_res)), int(round(np.interp(az, cfg.eta, np.arange(cfg.W))))


# -- trajectories -----------------------------------------------------------------------------

def test_line_has_zero_imu():
    tr = simulate_trajectory(TrajectorySpec("line", duration=5.0, speed=1.0))
    assert np.abs(tr.imu.gyro).max() == 0.0
    assert np.abs(tr.imu.acc).max() < 1e-12
    assert np.allclose(tr.gt_velocity[:, 0], 1.0)


def test_arc_closed_forms():
    tr = simulate_trajectory(TrajectorySpec("arc", duration=5.0, speed=1.0, radius=10.0))
    assert np.allclose(tr.imu.gyro[:, 2], 0.1, atol=1e-12)
    assert np.allclose(tr.imu.acc[:, 1], 0.1, atol=1e-12)
    # heading after 5 s on a 10 m circle
    k = np.argmin(np.abs(tr.frame_times - 4.0005))
    assert tr.gt_poses[k, 2] == pytest.approx(0.1 * tr.frame_times[k], abs=1e-9)


@pytest.mark.parametrize("kind", TRAJECTORY_KINDS)
def test_trajectories_deterministic_and_consistent(kind):
    spec = TrajectorySpec(kind, duration=8.0, speed=1.0, speed_variation=0.1, seed=4)
    a = simulate_trajectory(spec, gyro_noise=0.01, accel_noise=0.01)
    b = simulate_trajectory(spec, gyro_noise=0.01, accel_noise=0.01)
    assert np.array_equal(a.imu.acc, b.imu.acc) and np.array_equal(a.gt_poses, b.gt_poses)
    # frame stamps never coincide with IMU samples
    assert np.min(np.abs(a.frame_times[:, None] - a.imu.t[None, :])) > 1e-6
    # poses obey the velocity: finite-difference speed matches gt speed
    step = np.hypot(*np.diff(a.gt_poses[:, :2], axis=0).T) * 10.0
    mid = 0.5 * (a.gt_velocity[1:, 0] + a.gt_velocity[:-1, 0])
    assert np.allclose(step, mid, rtol=2e-3)


def test_invalid_trajectory_spec():
    with pytest.raises(ValueError):
        TrajectorySpec("spiral")
    with pytest.raises(ValueError):
        TrajectorySpec("line", duration=0.0)


# -- rendering ------------------------------------------------------------------------------

def test_stationary_single_landmark():
    cfg = RadarConfig(W=129, **QUIET)  # odd width puts a bin centre at 0°
    scene = Scene([[10.0, 0.0, 1.0]])
    f = render_frame(scene, [0, 0, 0], [0, 0, 0], 0.0, cfg)
    i, j = np.unravel_index(np.argmax(f.ras), f.ras.shape)
    assert (i, j) == bin_of(cfg, 10.0, 0.0)
    assert f.doppler[i, j] == 0.0
    assert np.all(f.ras >= 0)


def test_closing_doppler_is_negative():
    cfg = RadarConfig(**QUIET)
    f = render_frame(Scene([[10.0, 0.0, 1.0]]), [0, 0, 0], [2.0, 0, 0], 0.0, cfg)
    i, j = np.unravel_index(np.argmax(f.ras), f.ras.shape)
    assert f.doppler[i, j] == pytest.approx(-2.0, abs=1e-12)


def test_orthogonal_landmark_has_small_doppler():
    cfg = RadarConfig(**QUIET)
    az = np.deg2rad(30.0)
    heading = az - np.deg2rad(89.9)
    ob = observe(Scene([[8 * np.cos(az), 8 * np.sin(az), 1.0]]), [0, 0, 0],
                 [np.cos(heading), np.sin(heading), 0], 0.0, cfg)
    assert abs(ob.doppler[0]) < 2e-3


def test_static_doppler_matches_projection():
    cfg = RadarConfig(**QUIET)
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.uniform(3, 20, 12), rng.uniform(-10, 10, 12), np.ones(12)])
    v = np.array([1.3, -0.4, 0.0])
    ob = observe(Scene(pts), [0, 0, 0], v, 0.0, cfg)
    expect = -(np.cos(ob.azimuth) * v[0] + np.sin(ob.azimuth) * v[1])
    assert np.allclose(ob.doppler, expect, atol=1e-12)


def test_lever_arm_sweep_enters_doppler():
    cfg = RadarConfig(**QUIET)
    ext = Extrinsics(np.eye(3), [0.0, 0.5, 0.0])
    ob = observe(Scene([[10.0, 0.5, 1.0]]), [0, 0, 0], [0, 0, 0], 1.0, cfg, extrinsics=ext)
    # yawing at 1 rad/s moves the radar at (-0.5, 0): the target ahead is receding
    assert ob.doppler[0] == pytest.approx(0.5, abs=1e-12)


def test_inverse_fourth_power_law():
    cfg = RadarConfig(**QUIET)
    a = render_frame(Scene([[5.0, 0.0, 1.0]]), [0, 0, 0], [0, 0, 0], 0.0, cfg).ras.max()
    b = render_frame(Scene([[10.0, 0.0, 1.0]]), [0, 0, 0], [0, 0, 0], 0.0, cfg).ras.max()
    assert b / a == pytest.approx(1 / 16, rel=1e-9)


def test_rotation_shifts_columns():
    cfg = RadarConfig(**QUIET)
    rng = np.random.default_rng(2)
    pts = np.column_stack([rng.uniform(4, 22, 25), rng.uniform(-15, 15, 25), rng.uniform(0.5, 2, 25)])
    m = 5
    dtheta = m * (cfg.eta[1] - cfg.eta[0])
    a = render_frame(Scene(pts), [0, 0, 0], [0, 0, 0], 0.0, cfg).ras
    b = render_frame(Scene(pts), [0, 0, dtheta], [0, 0, 0], 0.0, cfg).ras
    # targets swing toward lower azimuth: b[:, j] = a[:, j + m]
    edge = 12
    diff = np.abs(b[:, edge: cfg.W - edge - m] - a[:, edge + m: cfg.W - edge])
    assert diff.max() < 1e-6 * a.max()


def test_ghosts_mirror_strongest():
    cfg = RadarConfig(**QUIET)
    scene = Scene([[5.0, 0.0, 5.0], [8.0, 2.0, 1.0]], ghost_rate=1.0)
    f = render_frame(scene, [0, 0, 0], [0, 0, 0], 0.0, cfg)
    g = 2 * np.array([5.0, 0.0]) - np.array([8.0, 2.0])
    i, j = bin_of(cfg, np.hypot(*g), np.arctan2(g[1], g[0]))
    expect = 0.3 * 1.0 / np.hypot(8.0, 2.0) ** 4
    assert f.ras[i - 1: i + 2, j - 1: j + 2].max() == pytest.approx(expect, rel=0.5)


def test_doppler_zero_at_noise_floor():
    cfg = RadarConfig(speckle_sigma=0.3, noise_floor=1e-7)
    f = render_frame(Scene([[10.0, 0.0, 1.0]]), [0, 0, 0], [1.0, 0, 0], 0.0, cfg)
    assert f.doppler[100, 0] == 0.0
    assert np.count_nonzero(f.doppler) < f.doppler.size / 4


def test_radar_config_validation():
    with pytest.raises(ValueError, match="eta"):
        RadarConfig(H=16, W=4, eta=np.array([0.0, 0.2, 0.1, 0.3]))
    with pytest.raises(ValueError):
        RadarConfig(fov_deg=95.0)
    assert RadarConfig(H=64, range_res=0.25).max_range == 16.0


# -- sequence files -----------------------------------------------------------------------------

def test_round_trip(tmp_path, short_seq):
    write_sequence(short_seq, tmp_path / "s")
    back = read_sequence(tmp_path / "s")
    assert len(back) == len(short_seq)
    assert np.array_equal(back.times, short_seq.times)
    assert np.array_equal(back.imu.t, short_seq.imu.t)
    assert np.array_equal(back.imu.acc, short_seq.imu.acc)
    assert np.array_equal(back.gt_poses, short_seq.gt_poses)
    assert np.array_equal(back.radar.eta, short_seq.radar.eta)
    assert np.array_equal(back.extrinsics.lever_arm, short_seq.extrinsics.lever_arm)
    for a, b in zip(short_seq.frames, back.frames):
        assert np.max(np.abs(a.ras - b.ras) / np.maximum(np.abs(a.ras), 1e-30)) <= 1e-6
        assert np.max(np.abs(a.doppler - b.doppler)) <= 1e-6


def test_write_is_deterministic(tmp_path, short_seq):
    write_sequence(short_seq, tmp_path / "a")
    write_sequence(short_seq, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_truncated_matrix_names_byte_count(tmp_path, short_seq):
    d = write_sequence(short_seq, tmp_path / "s")
    p = d / "ras_00002.f32"
    p.write_bytes(p.read_bytes()[:100])
    with pytest.raises(SequenceFormatError, match=r"ras_00002\.f32.*4096 bytes.*found 100"):
        read_sequence(d)


def test_meta_size_mismatch(tmp_path, short_seq):
    d = write_sequence(short_seq, tmp_path / "s")
    meta = json.loads((d / "meta.json").read_text())
    meta["W"] = 16
    meta["eta"] = meta["eta"][:16]
    (d / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(SequenceFormatError, match="bytes"):
        read_sequence(d)


def test_malformed_csv_names_line(tmp_path, short_seq):
    d = write_sequence(short_seq, tmp_path / "s")
    lines = (d / "gt_poses.csv").read_text().splitlines()
    lines[3] = "1.0,abc,2.0,0.0"
    (d / "gt_poses.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(SequenceFormatError, match="gt_poses.csv: line 4"):
        read_sequence(d)


def test_missing_directory():
    with pytest.raises(FileNotFoundError):
        read_sequence("/nonexistent/sequence")


def test_sequence_invariants(short_seq):
    assert len(short_seq.frames) == len(short_seq.gt_poses) == len(short_seq.gt_velocity)
    assert short_seq.imu.t[0] < short_seq.frames[0].t and short_seq.imu.t[-1] > short_seq.frames[-1].t
    assert len(short_seq.gt_map) >= 4
