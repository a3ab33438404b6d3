"""Seeded benchmark suites and the factor/provider ablation matrix."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .evaluation import ate
from .factors import (Combined, ConfidenceProvider, Oracle, ResidualAdaptive, Scheduled,
                      Uniform)
from .formats import StampedTrajectory
from .solver import FactorSet
from .synth import NoiseSpec, SceneSpec, SyntheticWorld, TrajectorySpec
from .system import PipelineConfig, WindowConfig, run_pipeline

log = logging.getLogger(__name__)


def noisy_suite(n: int = 10, seed: int = 0) -> list[SyntheticWorld]:
    """Fast lissajous motion, noisy correspondences with outliers, noisy IMU."""
    rng = np.random.default_rng([seed, 1])
    worlds = []
    for k in range(n):
        s = int(rng.integers(1 << 30))
        traj = TrajectorySpec(kind="lissajous", duration=3.0, frame_rate=10.0, imu_rate=200.0,
                              amplitudes=tuple(rng.uniform([0.4, 0.1, 0.3], [0.6, 0.25, 0.5])),
                              frequencies=tuple(rng.uniform([1.6, 1.0, 2.2], [2.2, 1.5, 3.0])),
                              wobble_amplitude=(0.08, 0.08, 0.05), seed=s)
        scene = SceneSpec(pixel_noise=0.25, outlier_fraction=0.2, feature_noise=0.05,
                          feature_wavelength=(0.4, 1.2), seed=s + 1)
        noise = NoiseSpec(gyro_noise=1.7e-4, accel_noise=2e-3, gyro_walk=1.9e-5,
                          accel_walk=3e-3, gyro_bias=tuple(rng.normal(0, 0.005, 3)),
                          accel_bias=tuple(rng.normal(0, 0.02, 3)), seed=s + 2)
        worlds.append(SyntheticWorld(traj, scene, noise))
    return worlds


def loop_suite(n: int = 10, seed: int = 100) -> list[SyntheticWorld]:
    """One full vertical circle that returns to its start."""
    rng = np.random.default_rng([seed, 2])
    worlds = []
    for k in range(n):
        s = int(rng.integers(1 << 30))
        radius = float(rng.uniform(0.4, 0.6))
        omega = float(rng.uniform(1.5, 2.0))
        traj = TrajectorySpec(kind="circle", duration=float(2 * np.pi / omega), radius=radius,
                              omega=omega, phase=float(rng.uniform(0, 2 * np.pi)), seed=s)
        scene = SceneSpec(pixel_noise=0.25, outlier_fraction=0.1, feature_noise=0.05, seed=s + 1)
        noise = NoiseSpec(gyro_noise=1.7e-4, accel_noise=2e-3, gyro_walk=1.9e-5,
                          accel_walk=3e-3, seed=s + 2)
        worlds.append(SyntheticWorld(traj, scene, noise))
    return worlds


BENCH_CONFIG = PipelineConfig(
    mode="mono", window=WindowConfig(size=5, flow_threshold=0.8, proximity_radius=0.3),
    init_keyframes=16, init_inverse_depth=0.33, global_ba=False,
    perturb_rotation=0.05, perturb_translation=0.05)


@dataclass(frozen=True)
class AblationRow:
    name: str
    factors: FactorSet
    provider: object        # zero-argument callable returning a ConfidenceProvider


def default_rows() -> list[AblationRow]:
    """Ablation matrix.  Every row takes w^r from the oracle outlier mask."""
    vis = FactorSet(True, False, False)
    feat = FactorSet(True, True, False)
    imu = FactorSet(True, False, True)
    allf = FactorSet(True, True, True)

    def combo(f, u):
        return lambda: Combined(Oracle(), f(), u())

    return [
        AblationRow("baseline", vis, Oracle),
        AblationRow("featmetric_fixed", feat, combo(lambda: Uniform(w_f=1.0), Uniform)),
        AblationRow("featmetric_scheduled", feat, combo(Scheduled, Uniform)),
        AblationRow("featmetric_adaptive", feat, combo(ResidualAdaptive, Uniform)),
        AblationRow("imu_fixed", imu, combo(Uniform, lambda: Uniform(w_u=1.0))),
        AblationRow("imu_scheduled", imu,
                    combo(Uniform, lambda: Scheduled(w_u_start=0.1, w_u_end=1.0))),
        AblationRow("combined", allf, combo(Scheduled, Uniform)),
    ]


def trajectory_of(result, world) -> tuple[StampedTrajectory, StampedTrajectory]:
    est = StampedTrajectory(result.times, result.vio)
    ref = StampedTrajectory(world.times, world.cam_poses)
    return est, ref


def run_row(world: SyntheticWorld, row: AblationRow, base: PipelineConfig = BENCH_CONFIG,
            metric: str = "sim3") -> float:
    cfg = replace(base, factors=row.factors)
    calib = world.calib() if row.factors.inertial else None
    res = run_pipeline(world, cfg, row.provider(), calib)
    return ate(*trajectory_of(res, world), mode=metric)


@dataclass
class AblationTable:
    rows: list[str]
    sequences: int
    ate: dict = field(default_factory=dict)         # row -> list of ATE (nan if failed)
    errors: dict = field(default_factory=dict)      # row -> list of messages
    seconds: float = 0.0

    def mean(self, row: str) -> float:
        v = np.asarray(self.ate[row], float)
        return float(np.mean(v)) if np.all(np.isfinite(v)) else float("nan")

    def delta(self, row: str, baseline: str = "baseline") -> float:
        """Percentage change of the mean ATE relative to the baseline (negative = better)."""
        return 100.0 * (self.mean(row) - self.mean(baseline)) / self.mean(baseline)

    def failed(self, row: str) -> bool:
        return bool(self.errors.get(row))

    def csv(self) -> str:
        head = ["config"] + [f"seq{k:02d}" for k in range(self.sequences)] + ["mean", "delta_pct"]
        lines = [",".join(head)]
        base = "baseline" if "baseline" in self.ate else None
        for r in self.rows:
            vals = ["%.6g" % x for x in self.ate[r]]
            d = "%.2f" % self.delta(r, base) if base and not self.failed(r) else ""
            status = "failed" if self.failed(r) else "%.6g" % self.mean(r)
            lines.append(",".join([r] + vals + [status, d]))
        return "\n".join(lines) + "\n"


def ablate(worlds: list[SyntheticWorld], rows: list[AblationRow] | None = None,
           base: PipelineConfig = BENCH_CONFIG, metric: str = "sim3") -> AblationTable:
    rows = default_rows() if rows is None else rows
    table = AblationTable([r.name for r in rows], len(worlds))
    t0 = time.perf_counter()
    for row in rows:
        vals, errs = [], []
        for k, w in enumerate(worlds):
            try:
                vals.append(run_row(w, row, base, metric))
            except Exception as exc:     # a failed row is reported, not fatal
                log.warning("row %s sequence %d failed: %s", row.name, k, exc)
                vals.append(float("nan"))
                errs.append(f"seq{k}: {type(exc).__name__}: {exc}")
        table.ate[row.name] = vals
        table.errors[row.name] = errs
    table.seconds = time.perf_counter() - t0
    return table


def loop_benchmark(worlds: list[SyntheticWorld], base: PipelineConfig | None = None,
                   metric: str = "se3"):
    """VIO versus global-BA ATE per sequence."""
    if base is None:
        # one loop yields too few keyframes for the 16-keyframe init
        base = replace(BENCH_CONFIG, factors=FactorSet(True, True, True), global_ba=True,
                       init_keyframes=8, perturb_rotation=0.0, perturb_translation=0.0)
    out = []
    for w in worlds:
        res = run_pipeline(w, base, Combined(Oracle(), Scheduled(), Uniform()),
                           w.calib() if base.inertial else None)
        ref = StampedTrajectory(w.times, w.cam_poses)
        out.append((ate(StampedTrajectory(res.times, res.vio), ref, metric),
                    ate(StampedTrajectory(res.times, res.slam), ref, metric)))
    return out


__all__ = ["noisy_suite", "loop_suite", "ablate", "default_rows", "AblationRow",
           "AblationTable", "loop_benchmark", "BENCH_CONFIG", "ConfidenceProvider"]
