import numpy as np
import pytest

from conftest import random_pose
from mfdba.evaluation import AlignmentError, align, associate, ate, trace_report
from mfdba.factors import Scheduled, Uniform
from mfdba.formats import StampedTrajectory
from mfdba.geometry import Pose
from mfdba.solver import GaugeSpec, LmConfig, lm_solve
from mfdba import audit


def reference(rng, n=50):
    t = np.arange(n) * 0.1
    poses = [Pose(random_pose(rng).R, [np.cos(k / 5), np.sin(k / 7), 0.1 * k])
             for k in range(n)]
    return StampedTrajectory(t, poses)


def transformed(traj, T, s=1.0):
    return StampedTrajectory(traj.t, [Pose(T.R @ P.R, s * T.R @ P.t + T.t) for P in traj.poses])


def test_identical_trajectories(rng):
    ref = reference(rng)
    assert ate(ref, ref, "se3") == pytest.approx(0, abs=1e-12)
    assert ate(ref, ref, "sim3") == pytest.approx(0, abs=1e-12)


def test_rigid_transform_removed(rng):
    ref = reference(rng)
    est = transformed(ref, random_pose(rng, scale=3.0))
    assert ate(est, ref, "se3") < 1e-10


def test_scale_semantics(rng):
    ref = reference(rng)
    est = transformed(ref, random_pose(rng), s=2.0)
    res = align(est, ref, "sim3")
    assert res.rmse < 1e-10 and res.scale == pytest.approx(0.5)
    assert ate(est, ref, "se3") > 0.1


def test_alignment_recovers_known_transform(rng):
    ref = reference(rng)
    T = random_pose(rng)
    res = align(ref, transformed(ref, T, 1.5), "sim3")
    assert np.allclose(res.R, T.R, atol=1e-10) and res.scale == pytest.approx(1.5)


def test_association_tolerance():
    ie, ir = associate([0.0, 1.0, 2.5], [0.005, 1.2, 2.5, 3.0], tol=0.01)
    assert ie.tolist() == [0, 2] and ir.tolist() == [0, 2]


def test_too_few_or_degenerate(rng):
    ref = reference(rng)
    short = StampedTrajectory(ref.t[:2], ref.poses[:2])
    with pytest.raises(AlignmentError):
        align(short, ref)
    line = StampedTrajectory(ref.t, [Pose(np.eye(3), [0.1 * k, 0, 0])
                                     for k in range(len(ref.t))])
    with pytest.raises(AlignmentError):
        align(line, line)


def test_unknown_mode(rng):
    ref = reference(rng)
    with pytest.raises(ValueError):
        align(ref, ref, "affine")


def solve_trace(rng, provider, max_iter=15):
    state, problem = audit._small_problem(rng, 3, False, noise=1.0)
    problem.provider = provider
    res = lm_solve(state, problem, GaugeSpec(frozenset({0}), freeze_scale=True),
                   LmConfig(max_iter=max_iter, cost_tol=0.0))
    return res


def test_scheduled_ratio_rises_from_zero(rng):
    res = solve_trace(rng, Scheduled())
    rep = trace_report(res.trace)
    assert rep.ratio[0] == 0.0
    assert rep.final_ratio == pytest.approx(1.1)


def test_uniform_columns_constant(rng):
    rep = trace_report(solve_trace(rng, Uniform()).trace)
    assert np.all(rep.mean_w_r == rep.mean_w_r[0]) and np.all(rep.mean_w_f == rep.mean_w_f[0])


def test_row_count_is_iteration_count(rng):
    res = solve_trace(rng, Scheduled())
    rep = trace_report(res.trace)
    rejected = sum(not r.accepted for r in res.trace)
    assert rep.summary()["rows"] == res.accepted + rejected == len(res.trace)
    assert rep.csv().count("\n") == len(res.trace) + 1


def test_empty_trace_rejected():
    with pytest.raises(ValueError):
        trace_report([])
