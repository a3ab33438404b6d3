import numpy as np
import pytest

from conftest import random_pose
from mfdba import audit
from mfdba.factors import CorrespondenceField
from mfdba.geometry import CameraIntrinsics, PixelGrid, Pose, project, rotation_angle, so3_exp
from mfdba.solver import (GaugeError, GaugeSpec, Layout, LmConfig, NormalEquations, Problem,
                          RankDeficientError, StateVector, StructuralError, FactorSet,
                          VisualEdge, free_variables, layout_for, lm_solve, retract,
                          schur_reduce, solve_step)


def system(state, problem):
    return audit.normal_equations(state, problem)


def two_view(rng, K=None, noise=0.0):
    K = K or CameraIntrinsics(48.0, 48.0, 31.5, 31.5, 64, 64)
    grid = PixelGrid.for_camera(K, 8)
    T0 = random_pose(rng, 0.3, 0.3)
    T1 = T0 @ Pose(so3_exp([0.02, -0.03, 0.01]), [0.15, 0.02, -0.05])
    d = rng.uniform(0.3, 0.6, (2,) + grid.shape)
    edges = []
    for i, j in ((0, 1), (1, 0)):
        T = (T0, T1)
        uv, ok = project(T[i], T[j], d[i], grid.coords, K)
        edges.append(VisualEdge(i, j, CorrespondenceField(uv + rng.normal(0, noise, uv.shape),
                                                          ok)))
    return StateVector([T0, T1], d), Problem(K, grid, edges)


def test_zero_residual_edge_has_zero_gradient(rng):
    state, problem = two_view(rng)
    problem.edges = problem.edges[:1]
    ne = system(state, problem)
    assert np.abs(ne.gp).max() < 1e-9 and np.abs(ne.gd).max() < 1e-9


def test_hessian_symmetric_psd(rng):
    for k in range(100):
        state, problem = audit._small_problem(rng, 3, inertial=bool(k % 2))
        H, _ = system(state, problem).dense()
        assert np.abs(H - H.T).max() <= 1e-10 * np.abs(H).max()
        assert np.linalg.eigvalsh(0.5 * (H + H.T)).min() > -1e-10 * np.abs(H).max()


def test_assembly_is_additive(rng):
    state, problem = two_view(rng, noise=0.5)
    both = system(state, problem)
    parts = []
    for e in problem.edges:
        sub = Problem(problem.K, problem.grid, [e])
        parts.append(system(state, sub))
    total = parts[0] + parts[1]
    for a, b in ((both.Hpp, total.Hpp), (both.Hpd, total.Hpd), (both.Hdd, total.Hdd),
                 (both.gp, total.gp), (both.gd, total.gd)):
        assert np.allclose(a, b, rtol=0, atol=1e-9 * max(np.abs(a).max(), 1))


def test_schur_matches_full_undamped_solve(rng):
    K = CameraIntrinsics(24.0, 24.0, 15.5, 15.5, 32, 32)
    for _ in range(10):
        state, problem = two_view(rng, K, noise=0.5)
        assert problem.grid.shape == (4, 4)
        # a third frame
        T2 = state.poses[1] @ Pose(so3_exp([0.01, 0.02, -0.01]), [0.1, -0.05, 0.02])
        d2 = rng.uniform(0.3, 0.6, problem.grid.shape)
        state = StateVector(state.poses + [T2], np.concatenate([state.depths, d2[None]]))
        for i, j in ((0, 2), (2, 0), (1, 2), (2, 1)):
            uv, ok = project(state.poses[i], state.poses[j], state.depths[i],
                             problem.grid.coords, K)
            problem.edges.append(VisualEdge(i, j, CorrespondenceField(
                uv + rng.normal(0, 0.5, uv.shape), ok)))
        state.poses[1] = state.poses[1].retract(rng.normal(0, 0.01, 6))
        ne = system(state, problem)
        gauge = GaugeSpec(frozenset({0}), freeze_scale=True)
        delta = solve_step(ne, gauge, problem.grid.shape, 0.0)
        fp, fd = free_variables(ne.layout, gauge, problem.grid.shape)
        free = np.concatenate([fp, fd])
        H, g = ne.dense()
        ref = np.linalg.solve(H[np.ix_(free, free)], -g[free])
        assert np.linalg.norm(delta[free] - ref) / np.linalg.norm(ref) < 1e-8
        assert np.array_equal(delta[~free], np.zeros((~free).sum()))


def test_empty_elimination_leaves_pose_block(rng):
    layout = Layout(1, 16, False)
    A = rng.normal(size=(6, 6))
    ne = NormalEquations(layout, A @ A.T, np.zeros((6, 16)), np.zeros(16), rng.normal(size=6),
                         np.zeros(16))
    red = schur_reduce(ne, np.ones(6, bool), np.ones(16, bool))
    assert np.array_equal(red.S, 0.5 * (ne.Hpp + ne.Hpp.T))
    assert np.array_equal(red.b, -ne.gp)


def test_missing_gauge_reports_rank_deficiency(rng):
    state, problem = two_view(rng, noise=0.5)
    ne = system(state, problem)
    with pytest.raises(RankDeficientError):
        solve_step(ne, GaugeSpec(frozenset()), problem.grid.shape, 0.0)
    with pytest.raises(GaugeError):
        lm_solve(state, problem, GaugeSpec(frozenset()))
    with pytest.raises(GaugeError):
        lm_solve(state, problem, GaugeSpec(frozenset({0})))


def test_ground_truth_is_stationary(rng):
    state, problem = two_view(rng)
    res = lm_solve(state, problem, GaugeSpec(frozenset({0}), freeze_scale=True))
    assert res.accepted == 0
    assert res.final_cost == res.initial_cost < 1e-20
    assert all(a.t.tolist() == b.t.tolist() for a, b in zip(res.state.poses, state.poses))


def test_two_view_recovery(rng):
    for _ in range(5):
        state, problem = two_view(rng)
        gt = state.poses[1]
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        shift = rng.normal(size=3)
        shift *= 0.1 / np.linalg.norm(shift)
        start = state.copy()
        start.poses[1] = Pose(gt.R @ so3_exp(np.deg2rad(5) * axis), gt.t + shift)
        res = lm_solve(start, problem, GaugeSpec(frozenset({0}), freeze_scale=True),
                       LmConfig(max_iter=10))
        T = res.state.poses[1]
        assert rotation_angle(gt.R.T @ T.R) < 1e-3
        assert np.linalg.norm(gt.t - T.t) < 1e-3


def test_accepted_costs_never_increase(rng):
    for k in range(20):
        state, problem = audit._small_problem(rng, 3, inertial=bool(k % 2), noise=2.0)
        gauge = GaugeSpec(frozenset({0}), freeze_scale=not problem.factors.inertial)
        res = lm_solve(state, problem, gauge)
        costs = [res.initial_cost] + [r.cost for r in res.trace if r.accepted]
        assert all(b <= a for a, b in zip(costs, costs[1:]))


# ---------------------------------------------------------------------------
# retraction


def inertial_state(rng):
    state, problem = audit._small_problem(rng, 3, inertial=True)
    return state, layout_for(state, problem)


def test_zero_delta_is_bitwise_identity(rng):
    state, layout = inertial_state(rng)
    out = retract(state, np.zeros(layout.pose_dim + layout.n * layout.pixels), GaugeSpec(),
                  layout)
    assert np.array_equal(out.depths, state.depths)
    for a, b in zip(out.poses, state.poses):
        assert np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t)
    for a, b in zip(out.motions, state.motions):
        assert np.array_equal(a.vector(), b.vector())


def test_frozen_variables_untouched(rng):
    state, layout = inertial_state(rng)
    gauge = GaugeSpec(frozenset({0}), freeze_scale=True, frozen_motions=frozenset({1}),
                      frozen_velocities=frozenset({2}))
    delta = rng.normal(0, 0.01, layout.pose_dim + layout.n * layout.pixels)
    out = retract(state, delta, gauge, layout)
    assert out.poses[0] is state.poses[0]
    assert np.array_equal(out.motions[1].vector(), state.motions[1].vector())
    assert np.array_equal(out.motions[2].v, state.motions[2].v)
    assert not np.array_equal(out.motions[2].ba, state.motions[2].ba)
    k, r, c = gauge.anchor_pixel(state.depths.shape[1:])
    assert out.depths[k, r, c] == state.depths[k, r, c]


def test_retract_round_trip(rng):
    state, layout = inertial_state(rng)
    for _ in range(20):
        delta = rng.normal(0, 1e-4, layout.pose_dim + layout.n * layout.pixels)
        back = retract(retract(state, delta, GaugeSpec(frozenset()), layout), -delta,
                       GaugeSpec(frozenset()), layout)
        for a, b in zip(back.poses, state.poses):
            assert np.abs(a.matrix() - b.matrix()).max() < 1e-9
        assert np.abs(back.depths - state.depths).max() < 1e-9


def test_depth_clamped_positive(rng):
    state, layout = inertial_state(rng)
    delta = np.zeros(layout.pose_dim + layout.n * layout.pixels)
    delta[layout.pose_dim:] = -10.0
    out = retract(state, delta, GaugeSpec(frozenset()), layout)
    assert out.depths.min() == pytest.approx(1e-6)


def test_wrong_delta_shape(rng):
    state, layout = inertial_state(rng)
    with pytest.raises(StructuralError):
        retract(state, np.ones(3), GaugeSpec(), layout)


def test_inertial_edge_must_be_consecutive(rng):
    state, problem = audit._small_problem(rng, 3, inertial=True)
    problem.inertial_edges[0].j = 2
    with pytest.raises(StructuralError):
        problem.validate(state)


def test_factor_set_needs_visual_term():
    with pytest.raises(ValueError):
        FactorSet(False, False, True)
