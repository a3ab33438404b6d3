from dataclasses import replace

import numpy as np
import pytest

from mfdba.benchmark import BENCH_CONFIG, loop_suite
from mfdba.factors import Combined, CorrespondenceField, Oracle, Scheduled, Uniform
from mfdba.geometry import Pose
from mfdba.imu import preintegrate, propagate
from mfdba.solver import (FactorSet, GaugeSpec, LmConfig, Problem, StateVector, VisualEdge,
                          lm_solve)
from mfdba.synth import NoiseSpec, SceneSpec, SyntheticWorld, TrajectorySpec, rotation_flow_field
from mfdba import system
from mfdba.system import (InsufficientExcitationError, Pipeline, PipelineConfig, WindowConfig,
                          keyframe_decision, run_pipeline, vi_initialize)

GYRO_BIAS = np.array([0.01, -0.02, 0.005])


# ---------------------------------------------------------------------------
# keyframes


def test_zero_flow_is_not_keyframe(grid):
    corr = CorrespondenceField(grid.coords, np.ones(grid.shape, bool))
    dec = keyframe_decision(corr, grid, 2.5)
    assert not dec.is_keyframe and dec.mean_flow == 0.0


def test_uniform_five_pixel_flow(grid):
    dec = keyframe_decision(rotation_flow_field(grid, 5.0), grid, 2.5)
    assert dec.is_keyframe and abs(dec.mean_flow - 5.0) < 1e-9


def test_infinite_threshold_only_tracking_loss(grid):
    assert not keyframe_decision(rotation_flow_field(grid, 50.0), grid, np.inf).is_keyframe
    lost = CorrespondenceField(grid.coords, np.zeros(grid.shape, bool))
    dec = keyframe_decision(lost, grid, np.inf)
    assert dec.is_keyframe and dec.reason == "tracking-loss"


def test_interval_rule(grid):
    corr = CorrespondenceField(grid.coords, np.ones(grid.shape, bool))
    assert keyframe_decision(corr, grid, 2.5, elapsed=1.0, max_interval=0.5).reason == "interval"


# ---------------------------------------------------------------------------
# initialization


def init_window(true_scale=2.0, kind="lissajous", n=10, step=3, gyro_bias=GYRO_BIAS):
    w = SyntheticWorld(TrajectorySpec(kind=kind, duration=step * n / 10.0, seed=4),
                       SceneSpec(seed=5), NoiseSpec(gyro_bias=tuple(gyro_bias)))
    frames = list(range(0, step * n, step))
    p0 = w.cam_poses[0].t
    poses = [Pose(w.cam_poses[k].R, p0 + (w.cam_poses[k].t - p0) / true_scale) for k in frames]
    depths = np.stack([w.depths[k] * true_scale for k in frames])
    edges = [VisualEdge(a, b, w.correspondence(frames[a], frames[b])[0])
             for a in range(n) for b in range(n) if a != b]
    problem = Problem(w.K, w.grid, edges)
    calib = w.calib()
    segs = [preintegrate(w.imu_samples.slice(w.times[a], w.times[b]), np.zeros(3),
                         np.zeros(3), calib) for a, b in zip(frames[:-1], frames[1:])]
    return w, StateVector(poses, depths), problem, segs, calib


def test_vi_initialization_recovers_scale_gravity_bias():
    w, state, problem, segs, calib = init_window()
    res = vi_initialize(state, problem, segs, calib, "mono", LmConfig(max_iter=40))
    g = res.gravity
    angle = np.degrees(np.arccos(np.clip(g @ w.gravity / np.linalg.norm(g)
                                         / np.linalg.norm(w.gravity), -1, 1)))
    assert abs(res.scale - 2.0) / 2.0 < 0.01
    assert angle < 0.5
    assert np.linalg.norm(res.gyro_bias - GYRO_BIAS) / np.linalg.norm(GYRO_BIAS) < 0.05


def test_metric_modes_do_not_estimate_scale(monkeypatch):
    seen = []
    real = system.linear_alignment

    def spy(*args, **kw):
        seen.append(args[3] if len(args) > 3 else kw.get("with_scale", True))
        return real(*args, **kw)

    monkeypatch.setattr(system, "linear_alignment", spy)
    w, state, problem, segs, calib = init_window(true_scale=1.0)
    res = vi_initialize(state, problem, segs, calib, "rgbd", LmConfig(max_iter=5))
    assert res.scale == 1.0
    assert seen and not any(seen)
    seen.clear()
    vi_initialize(state, problem, segs, calib, "stereo", LmConfig(max_iter=5))
    assert seen and not any(seen)


def test_zero_motion_window_rejected():
    w, state, problem, segs, calib = init_window(kind="static", gyro_bias=np.zeros(3))
    with pytest.raises(InsufficientExcitationError):
        vi_initialize(state, problem, segs, calib, "mono")


# ---------------------------------------------------------------------------
# sliding window


def test_stationary_stream_does_not_drift():
    w = SyntheticWorld(TrajectorySpec(kind="static", duration=9.9), SceneSpec(seed=1))
    cfg = PipelineConfig(mode="rgbd", factors=FactorSet(True, False, True),
                         window=WindowConfig(size=5, max_interval=0.25), init_keyframes=4,
                         global_ba=False)
    res = run_pipeline(w, cfg, Uniform(), w.calib())
    assert len(res.times) == 100
    drift = max(np.linalg.norm(T.t - G.t) for T, G in zip(res.vio, w.cam_poses))
    assert drift < 1e-3


def test_window_never_exceeds_size():
    w = SyntheticWorld(TrajectorySpec(kind="circle", duration=49.9, omega=0.3),
                       SceneSpec(seed=1))
    cfg = PipelineConfig(mode="rgbd", window=WindowConfig(size=4, max_interval=1.0),
                         init_keyframes=3, global_ba=False)
    res = run_pipeline(w, cfg, Uniform())
    assert len(res.times) == 500 and len(res.keyframes) > 20
    assert max(res.window_sizes) <= 4


def test_unrefined_nonkeyframe_is_propagated(monkeypatch):
    w = SyntheticWorld(TrajectorySpec(kind="lissajous", duration=2.0, seed=2),
                       SceneSpec(seed=3))
    cfg = PipelineConfig(mode="rgbd", factors=FactorSet(True, False, True),
                         window=WindowConfig(size=4, flow_threshold=0.3), init_keyframes=4,
                         refine_nonkeyframes=False, global_ba=False)
    pipe = Pipeline(w, cfg, Uniform(), w.calib())
    checked = []
    track = Pipeline._track

    def spy(self, k, refine=None):
        ref = self.graph.keyframes[self.window[-1]]
        pre = preintegrate(w.imu_samples.slice(w.times[ref.frame], w.times[k]),
                           ref.motion.ba, ref.motion.bg, self.calib)
        T, _ = propagate(ref.pose, ref.motion, pre, self.calib)
        track(self, k, refine)
        r, rel = self.ref[k]
        assert r == ref.frame
        assert np.abs((ref.pose @ rel).matrix() - T.matrix()).max() < 1e-12
        checked.append(k)

    monkeypatch.setattr(Pipeline, "_track", spy)
    pipe.run()
    assert len(checked) > 3


def test_noiseless_mono_vio_is_accurate():
    w = SyntheticWorld(TrajectorySpec(kind="lissajous", duration=2.0, seed=6),
                       SceneSpec(seed=7))
    cfg = PipelineConfig(window=WindowConfig(size=5, flow_threshold=0.3), init_keyframes=8,
                         factors=FactorSet(True, True, True))
    res = run_pipeline(w, cfg, Uniform(), w.calib())
    err = max(np.linalg.norm(T.t - G.t) for T, G in zip(res.vio, w.cam_poses))
    assert err < 1e-3


def test_inertial_mode_needs_calibration():
    w = SyntheticWorld(TrajectorySpec(kind="circle", duration=1.0))
    with pytest.raises(ValueError):
        Pipeline(w, PipelineConfig(factors=FactorSet(True, False, True)))


# ---------------------------------------------------------------------------
# global BA


def test_global_ba_reduces_loop_endpoint_error():
    world = loop_suite(1)[0]
    cfg = replace(BENCH_CONFIG, factors=FactorSet(True, True, True), global_ba=True,
                  init_keyframes=8, perturb_rotation=0.0, perturb_translation=0.0)
    res = run_pipeline(world, cfg, Combined(Oracle(), Scheduled(), Uniform()), world.calib())
    gt = world.cam_poses[-1].t
    assert np.linalg.norm(res.slam[-1].t - gt) < np.linalg.norm(res.vio[-1].t - gt)


def test_zero_radius_gives_temporal_chain():
    w = SyntheticWorld(TrajectorySpec(kind="circle", duration=3.0, omega=2.0), SceneSpec(seed=2))
    cfg = PipelineConfig(mode="rgbd", window=WindowConfig(size=50, flow_threshold=0.3,
                                                         proximity_radius=10.0),
                         init_keyframes=3, global_ba=False)
    pipe = Pipeline(w, cfg, Uniform())
    pipe.run()
    ids = pipe.graph.ids()
    chain = pipe.global_edges(radius=0.0)
    expect = {(ids[a], ids[b]) for a in range(len(ids)) for b in range(len(ids))
              if a != b and abs(a - b) <= cfg.window.neighbors}
    assert set(chain) == expect
    # with a window covering every keyframe the VIO graph is that same chain
    assert set(pipe.graph.edges) == expect
    assert len(pipe.global_edges()) > len(chain)


def test_duplicate_edges_leave_optimum_unchanged(rng):
    w = SyntheticWorld(TrajectorySpec(kind="circle", duration=1.0, omega=2.0),
                       SceneSpec(pixel_noise=0.5, seed=9))
    frames = [0, 3, 6]
    edges = [VisualEdge(a, b, w.correspondence(frames[a], frames[b])[0])
             for a in range(3) for b in range(3) if a != b]
    state = StateVector([w.cam_poses[k].retract(rng.normal(0, 0.01, 6)) for k in frames],
                        np.stack([w.depths[k] for k in frames]))
    cfg = LmConfig(max_iter=60, cost_tol=0.0, step_tol=1e-15)
    gauge = GaugeSpec(frozenset({0}), freeze_scale=True)
    a = lm_solve(state, Problem(w.K, w.grid, edges), gauge, cfg).state
    b = lm_solve(state, Problem(w.K, w.grid, edges + edges), gauge, cfg).state
    for P, Q in zip(a.poses, b.poses):
        assert np.abs(P.matrix() - Q.matrix()).max() < 1e-9
    assert np.abs(a.depths - b.depths).max() < 1e-9
