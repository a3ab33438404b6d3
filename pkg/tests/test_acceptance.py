"""Acceptance criteria, one test each.  Every test prints a single
``[PASS]``/``[FAIL]`` line with the measured statistic and runtime."""

import glob
import os
import time

import numpy as np
import pytest

from mfdba import audit
from mfdba.benchmark import (BENCH_CONFIG, ablate, default_rows, loop_benchmark, loop_suite,
                             noisy_suite)
from mfdba.factors import CorrespondenceField
from mfdba.formats import (StampedTrajectory, load_euroc_imu, read_tum, write_euroc_imu,
                           write_tum)
from mfdba.geometry import CameraIntrinsics, PixelGrid, Pose, project, so3_exp, so3_log
from mfdba.imu import ImuSamples, preintegrate
from mfdba.solver import GaugeSpec, LmConfig, Problem, StateVector, VisualEdge, lm_solve
from mfdba.synth import NoiseSpec, SceneSpec, SyntheticWorld, TrajectorySpec
from mfdba.system import vi_initialize

from conftest import random_pose

EUROC_ENV = "MFDBA_EUROC_IMU"
EUROC_GLOBS = ("~/datasets/euroc/*/mav0/imu0/data.csv", "~/euroc/*/mav0/imu0/data.csv",
               "/data/euroc/*/mav0/imu0/data.csv", "/datasets/euroc/*/mav0/imu0/data.csv")


@pytest.fixture
def report(capsys):
    def emit(n, ok, what, seconds, limit):
        ok = ok and seconds < limit
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {what} "
                  f"({seconds:.1f} s, limit {limit:g} s)")
        return ok
    return emit


def test_c01_jacobians(report):
    res = audit.jacobian_audit(n=500)
    worst = res.detail["worst"]
    plain = max(v for k, v in worst.items() if not k.startswith("featuremetric"))
    ok = report(1, res.passed, f"worst rel err {res.value:.2e} over 500 configs "
                f"(non-interpolated {plain:.2e})", res.seconds, 60)
    assert ok, res.detail


def test_c02_preintegration(report):
    res = audit.preintegration_audit()
    d = res.detail
    ok = report(2, res.passed, f"delta err {res.value:.2e}; bias ratios in "
                f"[{d['min_ratio']:.3f}, {d['max_ratio']:.3f}]", res.seconds, 30)
    assert ok, d


def test_c03_schur(report):
    res = audit.schur_audit()
    ok = report(3, res.passed, f"reduced vs full rel diff {res.value:.2e} on "
                f"{res.detail['instances']} instances", res.seconds, 10)
    assert ok


def test_c04_two_view(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    K = CameraIntrinsics(48.0, 48.0, 31.5, 31.5, 64, 64)
    grid = PixelGrid.for_camera(K, 8)
    worst_r = worst_t = 0.0
    iters = 0
    for _ in range(5):
        T0 = random_pose(rng, 0.3, 0.3)
        T1 = T0 @ Pose(so3_exp([0.02, -0.03, 0.01]), [0.15, 0.02, -0.05])
        d = rng.uniform(0.3, 0.6, (2,) + grid.shape)
        T = (T0, T1)
        edges = [VisualEdge(i, j, CorrespondenceField(*project(T[i], T[j], d[i], grid.coords,
                                                               K)))
                 for i, j in ((0, 1), (1, 0))]
        axis = rng.normal(size=3)
        shift = rng.normal(size=3)
        start = Pose(T1.R @ so3_exp(np.deg2rad(5) * axis / np.linalg.norm(axis)),
                     T1.t + 0.1 * shift / np.linalg.norm(shift))
        res = lm_solve(StateVector([T0, start], d.copy()), Problem(K, grid, edges),
                       GaugeSpec(frozenset({0}), freeze_scale=True), LmConfig(max_iter=15))
        est = res.state.poses[1]
        worst_r = max(worst_r, np.linalg.norm(so3_log(T1.R.T @ est.R)))
        worst_t = max(worst_t, np.linalg.norm(T1.t - est.t))
        iters = max(iters, res.iterations)
    dt = time.perf_counter() - t0
    ok = report(4, worst_r < 1e-3 and worst_t < 1e-3 and iters <= 15,
                f"rot err {worst_r:.1e} rad, trans err {worst_t:.1e} m, "
                f"<= {iters} iterations (5 trials)", dt, 5)
    assert ok


def test_c05_gauge(report):
    res = audit.gauge_audit()
    n = res.detail["null_dims"]
    ok = report(5, res.passed, f"null dims visual {n['visual']}, visual-inertial "
                f"{n['visual_inertial']}", res.seconds, 10)
    assert ok


def test_c06_vi_initialization(report):
    t0 = time.perf_counter()
    bias = np.array([0.01, -0.02, 0.005])
    scale, n, step = 2.0, 10, 3
    w = SyntheticWorld(TrajectorySpec(kind="lissajous", duration=step * n / 10.0, seed=4),
                       SceneSpec(seed=5), NoiseSpec(gyro_bias=tuple(bias)))
    frames = list(range(0, step * n, step))
    p0 = w.cam_poses[0].t
    # visual-only reconstruction at the wrong scale
    poses = [Pose(w.cam_poses[k].R, p0 + (w.cam_poses[k].t - p0) / scale) for k in frames]
    depths = np.stack([w.depths[k] * scale for k in frames])
    edges = [VisualEdge(a, b, w.correspondence(frames[a], frames[b])[0])
             for a in range(n) for b in range(n) if a != b]
    calib = w.calib()
    segs = [preintegrate(w.imu_samples.slice(w.times[a], w.times[b]), np.zeros(3), np.zeros(3),
                         calib) for a, b in zip(frames[:-1], frames[1:])]
    res = vi_initialize(StateVector(poses, depths), Problem(w.K, w.grid, edges), segs, calib,
                        "mono", LmConfig(max_iter=40))
    g = res.gravity
    angle = np.degrees(np.arccos(np.clip(g @ w.gravity / np.linalg.norm(g)
                                         / np.linalg.norm(w.gravity), -1, 1)))
    s_err = abs(res.scale - scale) / scale
    b_err = np.linalg.norm(res.gyro_bias - bias) / np.linalg.norm(bias)
    dt = time.perf_counter() - t0
    ok = report(6, s_err < 0.01 and angle < 0.5 and b_err < 0.05,
                f"scale err {100 * s_err:.1e}%, gravity err {angle:.1e} deg, "
                f"gyro bias err {100 * b_err:.1e}%", dt, 30)
    assert ok


# ---------------------------------------------------------------------------
# ablation: one run per row, shared by criteria 7 and 8

ROWS = ("baseline", "featmetric_fixed", "featmetric_scheduled", "imu_fixed", "combined")


@pytest.fixture(scope="module")
def ablation():
    worlds = noisy_suite(10)
    rows = {r.name: r for r in default_rows()}
    means, seconds = {}, {}
    for name in ROWS:
        table = ablate(worlds, [rows[name]], BENCH_CONFIG)
        assert not table.failed(name), table.errors[name]
        means[name] = table.mean(name)
        seconds[name] = table.seconds
    return means, seconds


def test_c07_ablation_direction(report, ablation):
    m, s = ablation
    base, feat, imu_, comb = (m["baseline"], m["featmetric_scheduled"], m["imu_fixed"],
                              m["combined"])
    reduction = 1 - comb / base
    ok = comb < imu_ < base and comb < feat < base and reduction >= 0.20
    dt = sum(s[k] for k in ("baseline", "featmetric_scheduled", "imu_fixed", "combined"))
    ok = report(7, ok, f"mean ATE combined {comb:.4g} < imu {imu_:.4g} / featmetric {feat:.4g} "
                f"< baseline {base:.4g}; reduction {100 * reduction:.1f}%", dt, 600)
    assert ok


def test_c08_fixed_weight_failure(report, ablation):
    m, s = ablation
    base, fixed, sched = m["baseline"], m["featmetric_fixed"], m["featmetric_scheduled"]
    dt = sum(s[k] for k in ("baseline", "featmetric_fixed", "featmetric_scheduled"))
    ok = report(8, fixed > base > sched, f"mean ATE fixed {fixed:.4g} > baseline {base:.4g} "
                f"> scheduled {sched:.4g}", dt, 600)
    assert ok


def test_c09_global_ba(report):
    t0 = time.perf_counter()
    pairs = loop_benchmark(loop_suite(10))
    wins = sum(slam < vio for vio, slam in pairs)
    dt = time.perf_counter() - t0
    ok = report(9, wins >= 9, f"SLAM < VIO on {wins}/10 loop sequences", dt, 600)
    assert ok


def _real_euroc():
    env = os.environ.get(EUROC_ENV)
    if env:
        return env
    for pattern in EUROC_GLOBS:
        hits = sorted(glob.glob(os.path.expanduser(pattern)))
        if hits:
            return hits[0]
    return None


def test_c10_formats(report, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    n = 10_000
    t_ns = 1403636579758555392 + np.cumsum(rng.integers(1, 10_000_000, n))
    s = ImuSamples(t_ns / 1e9, rng.normal(size=(n, 3)), rng.normal(scale=10, size=(n, 3)),
                   t_ns=t_ns)
    write_euroc_imu(tmp_path / "imu.csv", s)
    back = load_euroc_imu(tmp_path / "imu.csv")
    euroc_ok = (np.array_equal(back.t_ns, t_ns) and np.array_equal(back.gyro, s.gyro)
                and np.array_equal(back.accel, s.accel))

    poses = [random_pose(rng, scale=50.0) for _ in range(1000)]
    traj = StampedTrajectory(1403636579.0 + np.arange(1000) * 0.05, poses)
    write_tum(tmp_path / "traj.txt", traj)
    tb = read_tum(tmp_path / "traj.txt")
    tum_err = max(max(np.abs(a.t - b.t).max(), np.abs(a.R - b.R).max())
                  for a, b in zip(tb.poses, poses))

    real = _real_euroc()
    if real is None:
        note = f"no real EuRoC file found (set {EUROC_ENV}); real-file check skipped"
        real_ok = True
    else:
        samples = load_euroc_imu(real)
        note = f"real file {real}: {len(samples)} samples parsed"
        real_ok = len(samples) > 0
    dt = time.perf_counter() - t0
    ok = report(10, euroc_ok and tum_err < 1e-8 and real_ok,
                f"EuRoC bit-exact {euroc_ok}, TUM max err {tum_err:.1e}; {note}", dt, 5)
    assert ok
