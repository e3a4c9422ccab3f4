import numpy as np
import pytest

from rasio import tensor as T
from rasio.simulator import RadarConfig, Scene, observe
from rasio.tensor import Tensor
from rasio.velocity import (AllDynamicError, DegenerateGeometryError, Extrinsics, RansacParams,
                            body_to_radar_velocity, radar_to_body_velocity, ransac_static, solve_ego_velocity,
                            subpixel_doppler, subpixel_doppler_full)

from conftest import numeric_grad


def static_dopplers(alpha, v):
    return -(np.cos(alpha) * v[0] + np.sin(alpha) * v[1])


def contaminated(seed, n=40, frac=0.4, sigma=0.05):
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(-1.0, 1.0, n)
    v = rng.uniform(-2, 2, 2)
    d = static_dopplers(alpha, v) + rng.normal(0, sigma, n)
    out = np.zeros(n, bool)
    out[rng.choice(n, int(round(frac * n)), replace=False)] = True
    d[out] += rng.choice([-3.0, 3.0], out.sum())
    return alpha, d, ~out


# -- frames ----------------------------------------------------------------------------------

def test_zero_lever_arm_is_identity():
    v = np.array([1.0, -2.0, 0.3])
    assert np.allclose(body_to_radar_velocity(v, [0.1, 0.2, 0.3], Extrinsics()), v)


def test_pure_lever_arm_sweep():
    ext = Extrinsics(np.eye(3), [1.0, 0.0, 0.0])
    assert np.allclose(body_to_radar_velocity(np.zeros(3), [0, 0, 1.0], ext), [0, 1, 0])


def test_lever_arm_round_trip_with_rotation():
    c, s = np.cos(0.4), np.sin(0.4)
    ext = Extrinsics([[c, -s, 0], [s, c, 0], [0, 0, 1]], [0.3, -0.2, 0.1])
    v, w = np.array([1.2, 0.4, 0.0]), np.array([0.0, 0.0, 0.7])
    vr = body_to_radar_velocity(v, w, ext)
    assert np.allclose(radar_to_body_velocity(vr, w, ext), v, atol=1e-14)
    vt = body_to_radar_velocity(Tensor(v), Tensor(w), ext)
    assert np.allclose(vt.data, vr, atol=1e-14)


def test_extrinsics_rejects_reflection():
    with pytest.raises(ValueError):
        Extrinsics(np.diag([1.0, 1.0, -1.0]))


# -- sub-pixel Doppler ---------------------------------------------------------------------------

def test_doppler_on_pixel():
    D = np.random.default_rng(0).normal(size=(20, 20))
    out = subpixel_doppler(D, np.array([[7.0, 4.0]]), kappa=1e-4).data
    assert out[0] == pytest.approx(D[7, 4], abs=1e-12)


def test_doppler_midway():
    D = np.zeros((10, 10))
    D[5, 3], D[5, 4] = 1.0, 3.0
    out = subpixel_doppler(D, np.array([[5.0, 3.5]]), kappa=1e-4).data
    assert out[0] == pytest.approx(2.0, abs=1e-12)


def test_truncated_window_equals_full_support():
    rng = np.random.default_rng(1)
    D = rng.normal(size=(32, 48))
    uv = np.column_stack([rng.uniform(0, 31, 25), rng.uniform(0, 47, 25)])
    uv[0] = [0.2, 47.0]  # corner
    fast = subpixel_doppler(D, uv, kappa=0.01).data
    full = subpixel_doppler_full(D, uv, kappa=0.01)
    assert np.max(np.abs(fast - full)) <= 1e-12


def test_doppler_gradient_wrt_coordinates():
    rng = np.random.default_rng(2)
    D = rng.normal(size=(12, 12))
    uv = Tensor(np.array([[5.3, 6.6], [2.2, 8.9]]), requires_grad=True)
    T.backward(subpixel_doppler(D, uv, kappa=0.5).sum())
    x = uv.data.copy()
    num = numeric_grad(lambda: float(subpixel_doppler(D, x, kappa=0.5).data.sum()), x, 1e-6)
    assert np.allclose(uv.grad, num, atol=1e-7)


# -- least squares -----------------------------------------------------------------------------

def test_two_bearing_example():
    sol = solve_ego_velocity(np.deg2rad([0.0, 90.0]), [-2.0, 0.0])
    assert np.allclose(sol.vector, [2.0, 0.0], atol=1e-15)
    assert solve_ego_velocity(np.deg2rad([0.0, 45.0, 90.0]), np.zeros(3)).speed == 0.0


def test_simulator_bearings_recover_velocity():
    cfg = RadarConfig(speckle_sigma=0.0, doppler_noise=0.0, noise_floor=0.0)
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.uniform(4, 20, 8), rng.uniform(-8, 8, 8), np.ones(8)])
    v = np.array([1.7, -0.6, 0.0])
    ob = observe(Scene(pts), [0, 0, 0], v, 0.0, cfg)
    sol = solve_ego_velocity(ob.azimuth, ob.doppler)
    assert np.max(np.abs(sol.vector - v[:2])) < 1e-9


def test_solution_differentiable():
    alpha = Tensor(np.array([-0.5, 0.1, 0.7]), requires_grad=True)
    d = Tensor(static_dopplers(alpha.data, [1.0, 0.5]) + [0.01, -0.02, 0.0], requires_grad=True)
    T.backward(solve_ego_velocity(alpha, d).velocity.sum())
    a0, d0 = alpha.data.copy(), d.data.copy()
    na = numeric_grad(lambda: float(solve_ego_velocity(a0, d0).vector.sum()), a0, 1e-6)
    nd = numeric_grad(lambda: float(solve_ego_velocity(a0, d0).vector.sum()), d0, 1e-6)
    assert np.allclose(alpha.grad, na, atol=1e-6) and np.allclose(d.grad, nd, atol=1e-6)


def test_degenerate_geometry():
    with pytest.raises(DegenerateGeometryError):
        solve_ego_velocity([0.3, 0.3, 0.3], [1.0, 1.0, 1.0])
    with pytest.raises(DegenerateGeometryError):
        solve_ego_velocity([0.3], [1.0])


# -- RANSAC ----------------------------------------------------------------------------------

def test_ransac_all_static():
    rng = np.random.default_rng(4)
    alpha = rng.uniform(-1, 1, 20)
    mask, sol = ransac_static(alpha, static_dopplers(alpha, [0.8, -0.3]))
    assert mask.all()
    assert np.max(np.abs(sol.vector - [0.8, -0.3])) < 1e-9


def test_ransac_precision_recall_over_trials():
    tp = fp = fn = 0
    for seed in range(100):
        alpha, d, static = contaminated(seed)
        mask, _ = ransac_static(alpha, d, seed=seed)
        tp += np.sum(mask & static)
        fp += np.sum(mask & ~static)
        fn += np.sum(~mask & static)
    assert tp / (tp + fp) >= 0.99
    assert tp / (tp + fn) >= 0.99


def test_ransac_too_few_landmarks():
    with pytest.raises(ValueError):
        ransac_static([0.0, 0.5, 1.0], [0.0, 0.0, 0.0], RansacParams(min_inliers=4))


def test_ransac_all_dynamic():
    rng = np.random.default_rng(5)
    alpha = np.linspace(-1, 1, 10)
    with pytest.raises(AllDynamicError):
        ransac_static(alpha, rng.uniform(-20, 20, 10), RansacParams(inlier_tol=1e-6))
