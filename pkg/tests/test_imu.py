import numpy as np
import pytest

from conftest import random_pose, random_rotation
from mfdba.geometry import Pose, rotation_angle, so3_exp, so3_log
from mfdba.imu import (ImuCalib, ImuSamples, ImuSegmentError, MotionState, PREINT_REG,
                       corrected_deltas, inertial_residual, preintegrate,
                       preintegration_weight, propagate)
from mfdba.synth import NoiseSpec, Trajectory, TrajectorySpec, gen_imu

G = np.array([0.0, 0.0, -9.81])
CALIB = ImuCalib(gravity=G)


def true_deltas(traj, t0, t1):
    """Exact body-frame deltas from the analytic trajectory."""
    a, b = traj.state(t0), traj.state(t1)
    dt = t1 - t0
    Ri = a.pose.R
    dR = Ri.T @ b.pose.R
    dv = Ri.T @ (b.velocity - a.velocity - G * dt)
    dp = Ri.T @ (b.pose.t - a.pose.t - a.velocity * dt - 0.5 * G * dt * dt)
    return dR, dv, dp


def segment(traj, t0, t1, rate, noise=NoiseSpec()):
    n = int(round((t1 - t0) * rate)) + 1
    return gen_imu(traj, G, noise, np.linspace(t0, t1, n)).samples


def delta_error(pre, ref):
    dR, dv, dp = ref
    return max(rotation_angle(pre.dR.T @ dR), np.abs(pre.dv - dv).max(),
               np.abs(pre.dp - dp).max())


CIRCLE = TrajectorySpec(kind="circle", duration=2.0, radius=0.5, omega=2.0)


def test_null_signal():
    s = ImuSamples(np.linspace(0, 1, 11), np.zeros((11, 3)), np.zeros((11, 3)))
    pre = preintegrate(s, np.zeros(3), np.zeros(3), CALIB)
    assert np.array_equal(pre.dR, np.eye(3))
    assert np.array_equal(pre.dv, np.zeros(3)) and np.array_equal(pre.dp, np.zeros(3))


def test_constant_rate_closed_form():
    w, T = 0.7, 1.3
    n = 131
    gyro = np.tile([0.0, 0.0, w], (n, 1))
    s = ImuSamples(np.linspace(0, T, n), gyro, np.zeros((n, 3)))
    pre = preintegrate(s, np.zeros(3), np.zeros(3), CALIB)
    assert np.abs(pre.dR - so3_exp([0, 0, w * T])).max() < 1e-9


def test_matches_analytic_deltas_and_converges_quadratically():
    traj = Trajectory(CIRCLE)
    errs = []
    for rate in (200.0, 400.0, 2000.0):
        pre = preintegrate(segment(traj, 0.2, 0.5, rate), np.zeros(3), np.zeros(3), CALIB)
        errs.append(delta_error(pre, true_deltas(traj, 0.2, 0.5)))
    assert 3.0 < errs[0] / errs[1] < 5.0
    assert errs[2] < 1e-6


def test_bias_correction_second_order():
    traj = Trajectory(TrajectorySpec(kind="lissajous", duration=1.0, seed=3))
    s = segment(traj, 0.1, 0.6, 200.0)
    ba0 = np.array([0.02, -0.01, 0.03])
    bg0 = np.array([0.005, 0.01, -0.004])
    pre = preintegrate(s, ba0, bg0, CALIB)
    direction = np.array([0.3, -0.2, 0.4, 0.05, -0.07, 0.02])

    def err(scale):
        ba = ba0 + scale * direction[:3]
        bg = bg0 + scale * direction[3:]
        exact = preintegrate(s, ba, bg, CALIB)
        dR, dv, dp = corrected_deltas(pre, ba, bg)
        return max(np.linalg.norm(so3_log(dR.T @ exact.dR)), np.linalg.norm(dv - exact.dv),
                   np.linalg.norm(dp - exact.dp))

    ratios = [err(h) / err(h / 2) for h in (0.4, 0.2, 0.1)]
    assert all(3.5 < r < 4.5 for r in ratios)


def test_correction_at_linearization_point_is_identity():
    traj = Trajectory(CIRCLE)
    pre = preintegrate(segment(traj, 0, 0.3, 200), [0.1, 0, 0], [0, 0.01, 0], CALIB)
    dR, dv, dp = corrected_deltas(pre, pre.ba_lin, pre.bg_lin)
    assert np.array_equal(dR, pre.dR)
    assert np.array_equal(dv, pre.dv) and np.array_equal(dp, pre.dp)


def test_accel_bias_leaves_rotation_unchanged():
    traj = Trajectory(CIRCLE)
    pre = preintegrate(segment(traj, 0, 0.3, 200), np.zeros(3), np.zeros(3), CALIB)
    dR, _, _ = corrected_deltas(pre, [0.3, -0.1, 0.2], np.zeros(3))
    assert np.array_equal(dR, pre.dR)


def test_rejects_bad_segments():
    with pytest.raises(ImuSegmentError):
        preintegrate(ImuSamples([0.0], np.zeros((1, 3)), np.zeros((1, 3))), 0, 0, CALIB)
    with pytest.raises(ImuSegmentError):
        preintegrate(ImuSamples([0.0, 0.0], np.zeros((2, 3)), np.zeros((2, 3))), 0, 0, CALIB)


# ---------------------------------------------------------------------------
# weight


def test_longer_interval_less_information():
    traj = Trajectory(CIRCLE)
    short = preintegrate(segment(traj, 0, 0.2, 200), np.zeros(3), np.zeros(3), CALIB)
    long = preintegrate(segment(traj, 0, 0.4, 200), np.zeros(3), np.zeros(3), CALIB)
    assert np.trace(long.cov) > np.trace(short.cov)
    assert np.trace(preintegration_weight(long)) < np.trace(preintegration_weight(short))


def test_zero_noise_weight_is_regularizer():
    traj = Trajectory(CIRCLE)
    calib = ImuCalib(0, 0, 0, 0, gravity=G)
    pre = preintegrate(segment(traj, 0, 0.2, 200), np.zeros(3), np.zeros(3), calib)
    assert np.allclose(preintegration_weight(pre), np.eye(9) / PREINT_REG)


def test_weight_symmetric_psd(rng):
    for k in range(100):
        n = int(rng.integers(5, 40))
        s = ImuSamples(np.cumsum(rng.uniform(0.002, 0.01, n)), rng.normal(size=(n, 3)),
                       rng.normal(scale=5, size=(n, 3)))
        W = preintegration_weight(preintegrate(s, rng.normal(size=3) * 0.1,
                                               rng.normal(size=3) * 0.01, CALIB))
        assert np.array_equal(W, W.T)
        assert np.linalg.eigvalsh(W).min() > 0


# ---------------------------------------------------------------------------
# residual and propagation


def random_case(rng):
    traj = Trajectory(TrajectorySpec(kind="lissajous", duration=1.0,
                                     seed=int(rng.integers(1000))))
    s = segment(traj, 0.1, 0.3, 200)
    pre = preintegrate(s, rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.01, CALIB)
    T_i = random_pose(rng)
    M_i = MotionState(rng.normal(size=3), rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.01)
    return pre, T_i, M_i


def test_propagated_state_has_zero_residual(rng):
    for _ in range(20):
        pre, T_i, M_i = random_case(rng)
        T_j, v_j = propagate(T_i, M_i, pre, CALIB)
        M_j = MotionState(v_j, M_i.ba, M_i.bg)
        r, _, _ = inertial_residual(T_i, M_i, T_j, M_j, pre, CALIB, with_jacobians=False)
        assert np.abs(r).max() < 1e-8
        assert np.array_equal(r[9:], np.zeros(6))


def test_residual_jacobians_finite_difference(rng):
    eps, worst = 1e-6, 0.0
    for _ in range(100):
        pre, T_i, M_i = random_case(rng)
        T_j = T_i @ Pose(random_rotation(rng, 0.3), rng.normal(scale=0.2, size=3))
        M_j = MotionState(rng.normal(size=3), rng.normal(size=3) * 0.05,
                          rng.normal(size=3) * 0.01)
        _, J, _ = inertial_residual(T_i, M_i, T_j, M_j, pre, CALIB)

        def res(x):
            Ti = T_i.retract(x[0:6])
            Mi = MotionState.from_vector(M_i.vector() + x[6:15])
            Tj = T_j.retract(x[15:21])
            Mj = MotionState.from_vector(M_j.vector() + x[21:30])
            return inertial_residual(Ti, Mi, Tj, Mj, pre, CALIB, with_jacobians=False)[0]

        num = np.empty((15, 30))
        for k in range(30):
            d = np.zeros(30)
            d[k] = eps
            num[:, k] = (res(d) - res(-d)) / (2 * eps)
        for a, b in ((0, 6), (6, 15), (15, 21), (21, 30)):
            worst = max(worst, np.linalg.norm(J[:, a:b] - num[:, a:b])
                        / max(np.linalg.norm(num[:, a:b]), 1e-9))
    assert worst < 1e-5


def test_hovering_body_stays_put():
    n = 101
    s = ImuSamples(np.linspace(0, 0.5, n), np.zeros((n, 3)), np.tile([0, 0, 9.81], (n, 1)))
    calib = ImuCalib(gravity=G)
    pre = preintegrate(s, np.zeros(3), np.zeros(3), calib)
    T0 = calib.camera_pose(Pose.identity())
    T1, v1 = propagate(T0, MotionState(), pre, calib)
    assert np.allclose(T1.matrix(), T0.matrix(), atol=1e-12)
    assert np.abs(v1).max() < 1e-12


def test_propagation_tracks_circle():
    traj = Trajectory(CIRCLE)
    calib = ImuCalib(gravity=G)
    for t0 in (0.0, 0.5, 1.0):
        pre = preintegrate(segment(traj, t0, t0 + 0.5, 200), np.zeros(3), np.zeros(3), calib)
        a, b = traj.state(t0), traj.state(t0 + 0.5)
        T1, v1 = propagate(calib.camera_pose(a.pose), MotionState(a.velocity), pre, calib)
        assert np.linalg.norm(calib.body_pose(T1).t - b.pose.t) < 1e-4
        assert np.linalg.norm(v1 - b.velocity) < 1e-3


def test_information_scales_with_weight(rng):
    pre, T_i, M_i = random_case(rng)
    _, _, W1 = inertial_residual(T_i, M_i, T_i, M_i, pre, CALIB, 1.0, False)
    _, _, W2 = inertial_residual(T_i, M_i, T_i, M_i, pre, CALIB, 0.25, False)
    assert np.allclose(W2, 0.25 * W1)
