import numpy as np
import pytest

from rasio import tensor as T
from rasio.losses import (LossWeights, combine, geometry_loss, kinematic_loss, patched_translation,
                          total_loss, transfer_points, velocity_alignment_loss)
from rasio.preintegration import ImuStream, preintegrate, quat_to_rotmat_np
from rasio.tensor import Tensor
from rasio.velocity import Extrinsics

from conftest import numeric_grad


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def turning_stream(w, speed, duration, rate=1000):
    """Body moving at constant body-frame speed along x while yawing at w."""
    n = int(round(duration * rate)) + 1
    t = np.linspace(0, duration, n)
    acc = np.tile([0.0, w * speed, 0.0], (n, 1))
    gyro = np.tile([0.0, 0.0, w], (n, 1))
    return ImuStream(t, acc, gyro)


# -- translation ------------------------------------------------------------------------------

def test_zero_velocity_patch():
    dp = np.array([0.1, -0.2, 0.0])
    assert np.array_equal(patched_translation(np.zeros(3), dp, 0.1).data, dp)


def test_straight_line_patch():
    assert np.allclose(patched_translation([1.0, 0, 0], np.zeros(3), 0.1).data, [0.1, 0, 0])


def test_rotating_frame_matches_quadrature():
    w, v, dt = 1.0, 1.0, 0.1
    pre = preintegrate(turning_stream(w, v, dt))
    t = patched_translation([v, 0, 0], pre.dp, pre.dt_total).data
    # the body travels an arc: ∫ R(s)·(v, 0) ds
    s = np.linspace(0, dt, 1001)
    f = np.stack([v * np.cos(w * s), v * np.sin(w * s)])
    quad = ((f[:, 1:] + f[:, :-1]) * 0.5 * np.diff(s)).sum(axis=1)
    assert np.allclose(t[:2], quad, atol=1e-6)


def test_rotated_initial_velocity_form_needs_path():
    with pytest.raises(ValueError):
        patched_translation([1.0, 0, 0], np.zeros(3), rotate_initial_velocity=True)
    Rs = [np.eye(3), np.eye(3)]
    out = patched_translation([1.0, 0, 0], np.zeros(3), rotations=Rs, dts=[0.1], rotate_initial_velocity=True)
    assert np.allclose(out.data, [0.1, 0, 0])


# -- geometry loss ---------------------------------------------------------------------------

def test_geometry_exact_correspondences_zero():
    rng = np.random.default_rng(0)
    ext = Extrinsics(rot_z(0.1), [0.2, -0.1, 0.3])
    p = rng.uniform(-10, 10, (15, 2))
    R, t = rot_z(0.2), np.array([0.5, 0.1, 0.0])
    q = transfer_points(p, R, t, ext).data
    assert geometry_loss(p, q, np.ones(15), R, t, ext).item() == pytest.approx(0.0, abs=1e-20)


def test_geometry_unit_offset():
    p = np.array([[3.0, 1.0]])
    assert geometry_loss(p, p + [1.0, 0.0], [1.0], np.eye(3), np.zeros(3)).item() == pytest.approx(0.5)


def test_geometry_empty_pairs():
    assert geometry_loss(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.eye(3), np.zeros(3)).item() == 0.0


def test_transfer_is_rigid_inverse():
    # a point fixed in the world seen from two body poses
    R, t = rot_z(0.3), np.array([1.0, 0.5, 0.0])
    world = np.array([[5.0, 2.0]])
    p_k = world  # body k at the origin
    p_k1 = (rot_z(0.3).T @ (np.r_[world[0], 0.0] - t))[:2]
    assert np.allclose(transfer_points(p_k, R, t, Extrinsics()).data[0], p_k1, atol=1e-14)


# -- kinematic loss ---------------------------------------------------------------------------

def test_kinematic_in_column_space():
    G = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0], [-0.6, 0.8]])
    assert kinematic_loss(G, G @ [0.7, -1.1]).item() == pytest.approx(0.0, abs=1e-12)


def test_kinematic_orthogonal_component():
    G = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    assert kinematic_loss(G, [0.0, 0.0, 1.0]).item() == pytest.approx(1.0, abs=1e-15)


# -- velocity alignment -----------------------------------------------------------------------

def test_alignment_constant_velocity():
    v = np.array([1.0, 0.2, 0.0])
    assert velocity_alignment_loss(v, np.zeros(3), np.eye(3), v).item() == pytest.approx(0.0, abs=1e-14)


def test_alignment_quarter_turn():
    w = np.pi / 2
    v = np.array([1.0, 0.0, 0.0])
    R = rot_z(np.pi / 2)
    # closed-form velocity increment on the arc
    dv = np.array([np.cos(w * 1.0) - 1.0, np.sin(w * 1.0), 0.0])
    assert velocity_alignment_loss(v, dv, R, v).item() == pytest.approx(0.0, abs=1e-9)
    pre = preintegrate(turning_stream(w, 1.0, 1.0))
    R_pre = quat_to_rotmat_np(pre.dq.data)
    assert velocity_alignment_loss(v, pre.dv.data, R_pre, v).item() < 1e-6


def test_alignment_perturbation():
    v = np.array([1.0, 0.0, 0.0])
    eps = 0.03
    assert velocity_alignment_loss(v, np.zeros(3), np.eye(3), v + [eps, 0, 0]).item() == pytest.approx(eps)


# -- total --------------------------------------------------------------------------------------

def test_total_loss_weights():
    assert total_loss(0.0, 0.0, 0.0).item() == 0.0
    assert total_loss(1.0, 1.0, 1.0).item() == pytest.approx(1.15, abs=1e-15)
    assert total_loss(1.0, 2.0, 3.0, LossWeights(0.5, 0.25)).item() == pytest.approx(2.75)
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0.1)


def test_combine_sums_in_order():
    parts = [(Tensor(1.0), Tensor(2.0), Tensor(3.0)), (Tensor(0.5), Tensor(0.0), Tensor(1.0))]
    lc = combine(parts)
    assert lc.values() == pytest.approx((1.5, 2.0, 4.0, 1.5 + 0.1 + 0.4))


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    p = rng.uniform(-5, 5, (6, 2))
    q = p + rng.normal(0, 0.3, (6, 2))
    c = rng.uniform(0.1, 1, 6)
    G = np.column_stack([np.cos(np.linspace(-1, 1, 6)), np.sin(np.linspace(-1, 1, 6))])
    B = rng.normal(size=6)
    t0 = np.array([0.3, -0.1, 0.0])

    def build(t, b):
        L1 = geometry_loss(p, q, c, rot_z(0.05), t)
        L2 = kinematic_loss(G, b)
        L3 = velocity_alignment_loss(t, np.zeros(3), rot_z(0.1), [0.2, 0.1, 0.0])
        return total_loss(L1, L2, L3)

    tt, bt = Tensor(t0.copy(), requires_grad=True), Tensor(B.copy(), requires_grad=True)
    T.backward(build(tt, bt))
    nt = numeric_grad(lambda: build(t0, B).item(), t0, 1e-6)
    nb = numeric_grad(lambda: build(t0, B).item(), B, 1e-6)
    assert np.allclose(tt.grad, nt, atol=1e-7)
    assert np.allclose(bt.grad, nb, atol=1e-7)
