"""Numerical self-checks: finite-difference Jacobians, Schur equivalence,
pre-integration against a fine-step reference, and gauge nullity.

Each audit returns an :class:`AuditResult`; :func:`run_audits` collects them
into a machine-readable report.  The audits resolve the functions under test
through their modules at call time, so a patched (fault-injected) function is
what gets checked.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import factors as _factors
from . import geometry as _geometry
from . import imu as _imu
from . import solver as _solver
from .geometry import CameraIntrinsics, PixelGrid, Pose, so3_exp
from .imu import GRAVITY, ImuCalib, ImuSamples, MotionState

JACOBIAN_TOL = 1e-5
INTERP_TOL = 1e-3        # feature-metric terms go through bilinear interpolation
PREINT_TOL = 1e-6
BIAS_RATIO = (3.5, 4.5)
SCHUR_TOL = 1e-8
NULL_TOL = 1e-8
FD_EPS = 1e-6


@dataclass
class AuditResult:
    name: str
    passed: bool
    value: float                 # worst observed statistic
    threshold: str
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0


@dataclass
class AuditReport:
    results: list[AuditResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "audits": [asdict(r) for r in self.results]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_jsonable)


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x).__name__)


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-9) -> float:
    """Frobenius relative error with an absolute floor for vanishing blocks."""
    a = np.asarray(analytic, float)
    b = np.asarray(numeric, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


# ---------------------------------------------------------------------------
# random configurations


def audit_camera() -> tuple[CameraIntrinsics, PixelGrid]:
    K = CameraIntrinsics(fx=48.0, fy=48.0, cx=31.5, cy=31.5, width=64, height=64)
    return K, PixelGrid.for_camera(K, 8)


def _random_pose(rng, rot=np.pi, trans=2.0) -> Pose:
    return Pose(so3_exp(rng.normal(size=3) * rot / np.sqrt(3)), rng.uniform(-trans, trans, 3))


def _pair(rng, grid):
    """Two views of a random inverse-depth grid with most pixels in view."""
    T_i = _random_pose(rng)
    T_j = T_i @ Pose(so3_exp(rng.normal(0, 0.05, 3)), rng.normal(0, 0.1, 3))
    d = rng.uniform(0.2, 1.0, grid.shape)
    return T_i, T_j, d


def smooth_features(rng, K: CameraIntrinsics, channels: int = 4) -> "_factors.FeatureMap":
    """Band-limited random image features (a few low-frequency sinusoids)."""
    v, u = np.mgrid[0:K.height, 0:K.width].astype(float)
    data = np.zeros((K.height, K.width, channels))
    for c in range(channels):
        for _ in range(4):
            k = rng.normal(0, 0.15, 2)
            data[..., c] += np.sin(k[0] * u + k[1] * v + rng.uniform(0, 2 * np.pi))
    return _factors.FeatureMap(data)


def _random_segment(rng, calib, n=21, dt=0.005):
    t = np.arange(n) * dt
    gyro = rng.normal(0, 0.5, 3) + rng.normal(0, 0.1, (n, 3))
    accel = np.array([0.0, 0.0, 9.81]) + rng.normal(0, 1.0, 3) + rng.normal(0, 0.3, (n, 3))
    samples = ImuSamples(t, gyro, accel)
    return _imu.preintegrate(samples, rng.normal(0, 0.05, 3), rng.normal(0, 0.01, 3), calib)


def _random_motion(rng) -> MotionState:
    return MotionState(rng.normal(0, 1.0, 3), rng.normal(0, 0.05, 3), rng.normal(0, 0.01, 3))


# ---------------------------------------------------------------------------
# Jacobians


def _pose_fd(f, T_i, T_j, eps):
    """Central differences of f(T_i, T_j) over the 12 pose perturbations."""
    cols_i, cols_j = [], []
    for k in range(6):
        e = np.zeros(6)
        e[k] = eps
        cols_i.append((f(T_i.retract(e), T_j) - f(T_i.retract(-e), T_j)) / (2 * eps))
        cols_j.append((f(T_i, T_j.retract(e)) - f(T_i, T_j.retract(-e))) / (2 * eps))
    return np.stack(cols_i, -1), np.stack(cols_j, -1)


def _check_projection(rng, K, grid, eps):
    T_i, T_j, d = _pair(rng, grid)
    x = grid.coords
    uv, valid, J_i, J_j, J_d = _geometry.project_jacobians(T_i, T_j, d, x, K, in_image=False)
    proj = lambda a, b, dd=d: _geometry.project(a, b, dd, x, K, in_image=False)[0]
    Fi, Fj = _pose_fd(proj, T_i, T_j, eps)
    Fd = (proj(T_i, T_j, d + eps) - proj(T_i, T_j, d - eps)) / (2 * eps)
    m = valid
    return {"projection/pose_i": rel_err(J_i[m], Fi[m]),
            "projection/pose_j": rel_err(J_j[m], Fj[m]),
            "projection/depth": rel_err(J_d[m], Fd[m])}


def _check_reprojection(rng, K, grid, eps):
    T_i, T_j, d = _pair(rng, grid)
    uv, valid = _geometry.project(T_i, T_j, d, grid.coords, K, in_image=False)
    corr = _factors.CorrespondenceField(uv + rng.normal(0, 1.0, uv.shape), valid)

    def res(a, b, dd=d):
        return _factors.reprojection_term(a, b, dd, corr, 1.0, grid, K).residual

    t = _factors.reprojection_term(T_i, T_j, d, corr, 1.0, grid, K)
    Fi, Fj = _pose_fd(res, T_i, T_j, eps)
    Fd = (res(T_i, T_j, d + eps) - res(T_i, T_j, d - eps)) / (2 * eps)
    m = t.valid
    return {"reprojection/pose_i": rel_err(t.J_i[m], Fi[m]),
            "reprojection/pose_j": rel_err(t.J_j[m], Fj[m]),
            "reprojection/depth": rel_err(t.J_d[m], Fd[m])}


def _cell(uv):
    return np.floor(uv).astype(int)


def _check_featuremetric(rng, K, grid, eps):
    T_i, T_j, d = _pair(rng, grid)
    F_i, F_j = smooth_features(rng, K), smooth_features(rng, K)
    x = grid.coords
    P = grid.size
    t = _factors.featuremetric_term(T_i, T_j, d, F_i, F_j, 1.0, grid, K)
    uv0, _ = _geometry.project(T_i, T_j, d, x, K)
    cell0 = _cell(uv0).reshape(P, 2)

    # bilinear interpolation is piecewise smooth: keep pixels whose perturbed
    # projections stay in the same interpolation cell and inside the image
    keep = t.valid.copy()

    def res(a, b, dd=d):
        nonlocal keep
        uv, ok = _geometry.project(a, b, dd, x, K)
        keep &= ok.reshape(P) & np.all(_cell(uv).reshape(P, 2) == cell0, axis=1)
        return _factors.featuremetric_term(a, b, dd, F_i, F_j, 1.0, grid, K).residual

    Fi, Fj = _pose_fd(res, T_i, T_j, eps)
    Fd = (res(T_i, T_j, d + eps) - res(T_i, T_j, d - eps)) / (2 * eps)
    m = keep
    return {"featuremetric/pose_i": rel_err(t.J_i[m], Fi[m]),
            "featuremetric/pose_j": rel_err(t.J_j[m], Fj[m]),
            "featuremetric/depth": rel_err(t.J_d[m], Fd[m])}, int(m.sum())


def _check_inertial(rng, calib, eps):
    pre = _random_segment(rng, calib)
    T_i = _random_pose(rng)
    T_j = T_i @ Pose(so3_exp(rng.normal(0, 0.1, 3)), rng.normal(0, 0.2, 3))
    M_i, M_j = _random_motion(rng), _random_motion(rng)
    _, J, _ = _imu.inertial_residual(T_i, M_i, T_j, M_j, pre, calib)

    def r(Ti, Mi, Tj, Mj):
        return _imu.inertial_residual(Ti, Mi, Tj, Mj, pre, calib, with_jacobians=False)[0]

    cols = []
    for block in range(4):
        for k in range(6 if block in (0, 2) else 9):
            out = []
            for s in (eps, -eps):
                args = [T_i, M_i, T_j, M_j]
                if block in (0, 2):
                    e = np.zeros(6)
                    e[k] = s
                    args[block] = args[block].retract(e)
                else:
                    v = args[block].vector().copy()
                    v[k] += s
                    args[block] = MotionState.from_vector(v)
                out.append(r(*args))
            cols.append((out[0] - out[1]) / (2 * eps))
    F = np.stack(cols, -1)
    names = (("pose_i", slice(0, 6)), ("motion_i", slice(6, 15)),
             ("pose_j", slice(15, 21)), ("motion_j", slice(21, 30)))
    return {f"inertial/{n}": rel_err(J[:, s], F[:, s]) for n, s in names}


@_timed
def jacobian_audit(n: int = 500, seed: int = 0, eps: float = FD_EPS) -> AuditResult:
    """Analytic Jacobians against central differences over ``n`` random configurations."""
    rng = np.random.default_rng(seed)
    K, grid = audit_camera()
    calib = ImuCalib(T_body_cam=Pose(so3_exp([0.1, -0.2, 0.05]), [0.05, -0.02, 0.1]))
    worst: dict[str, float] = {}
    pixels = 0
    for _ in range(n):
        errs = {}
        errs.update(_check_projection(rng, K, grid, eps))
        errs.update(_check_reprojection(rng, K, grid, eps))
        fm, kept = _check_featuremetric(rng, K, grid, eps)
        pixels += kept
        errs.update(fm)
        errs.update(_check_inertial(rng, calib, eps))
        for k, v in errs.items():
            worst[k] = max(worst.get(k, 0.0), v)
    fails = [k for k, v in worst.items()
             if v >= (INTERP_TOL if k.startswith("featuremetric") else JACOBIAN_TOL)]
    return AuditResult("jacobians", not fails, max(worst.values()),
                       f"rel err < {JACOBIAN_TOL:g} ({INTERP_TOL:g} interpolated)",
                       {"configurations": n, "worst": worst, "failed_blocks": fails,
                        "featuremetric_pixels_checked": pixels})


# ---------------------------------------------------------------------------
# pre-integration


@_timed
def preintegration_audit(rate: float = 500.0, factor: int = 100, seed: int = 0,
                         segments: int = 3) -> AuditResult:
    """Noiseless deltas against a ``factor``-times finer reference, and the
    quadratic decay of the first-order bias-correction error."""
    from .synth import Trajectory, TrajectorySpec, gen_imu
    calib = ImuCalib()
    rng = np.random.default_rng(seed)
    worst = 0.0
    ratios = []
    for kind in ("circle", "lissajous"):
        traj = Trajectory(TrajectorySpec(kind=kind, duration=2.0, seed=seed))
        for _ in range(segments):
            t0 = float(rng.uniform(0.1, 1.7))
            t1 = t0 + 0.1
            n = int(round((t1 - t0) * rate))
            coarse = gen_imu(traj, GRAVITY, times=np.linspace(t0, t1, n + 1)).samples
            fine = gen_imu(traj, GRAVITY, times=np.linspace(t0, t1, factor * n + 1)).samples
            z = np.zeros(3)
            a = _imu.preintegrate(coarse, z, z, calib)
            b = _imu.preintegrate(fine, z, z, calib)
            worst = max(worst, np.abs(a.dR - b.dR).max(), np.abs(a.dv - b.dv).max(),
                        np.abs(a.dp - b.dp).max())

            # bias correction: error of the linear update shrinks 4x when the offset halves
            direction_a = rng.normal(size=3)
            direction_g = rng.normal(size=3)
            errs = []
            for delta in (0.04, 0.02, 0.01):
                ba, bg = delta * direction_a, 0.25 * delta * direction_g
                dR, dv, dp = _imu.corrected_deltas(a, ba, bg)
                ex = _imu.preintegrate(coarse, ba, bg, calib)
                errs.append(np.linalg.norm(np.concatenate(
                    [_geometry.so3_log(ex.dR.T @ dR), dv - ex.dv, dp - ex.dp])))
            ratios += [errs[0] / errs[1], errs[1] / errs[2]]
    lo, hi = BIAS_RATIO
    ok = worst < PREINT_TOL and all(lo <= r <= hi for r in ratios)
    return AuditResult("preintegration", ok, worst,
                       f"delta err < {PREINT_TOL:g}; bias ratio in [{lo}, {hi}]",
                       {"imu_rate_hz": rate, "reference_factor": factor,
                        "bias_ratios": [float(r) for r in ratios],
                        "min_ratio": float(min(ratios)), "max_ratio": float(max(ratios))})


# ---------------------------------------------------------------------------
# Schur complement


def _small_problem(rng, n_frames=3, inertial=False, noise=1.0):
    """Small synthetic problem with exact-plus-noise correspondences."""
    K, grid = audit_camera()
    base = _random_pose(rng)
    poses = [base]
    for _ in range(n_frames - 1):
        poses.append(poses[-1] @ Pose(so3_exp(rng.normal(0, 0.03, 3)), rng.normal(0, 0.1, 3)))
    d = rng.uniform(0.3, 0.8, (n_frames,) + grid.shape)
    edges = []
    for i in range(n_frames):
        for j in range(n_frames):
            if i != j:
                uv, ok = _geometry.project(poses[i], poses[j], d[i], grid.coords, K)
                corr = _factors.CorrespondenceField(uv + rng.normal(0, noise, uv.shape), ok)
                edges.append(_solver.VisualEdge(i, j, corr))
    motions, iedges, calib = None, [], None
    if inertial:
        calib = ImuCalib(gyro_noise=1e-2, accel_noise=1e-1, gyro_walk=1e-3, accel_walk=1e-2)
        motions = [_random_motion(rng) for _ in range(n_frames)]
        iedges = [_solver.InertialEdge(k, k + 1, _random_segment(rng, calib))
                  for k in range(n_frames - 1)]
    factors = _solver.FactorSet(True, False, inertial)
    problem = _solver.Problem(K, grid, edges, factors, _factors.Uniform(), None, iedges, calib)
    # perturb away from the generating state
    pert = [T.retract(rng.normal(0, 0.01, 6)) for T in poses]
    state = _solver.StateVector(pert, d * rng.uniform(0.9, 1.1, d.shape), motions)
    return state, problem


def normal_equations(state, problem):
    raw = _solver.evaluate_terms(state, problem)
    conf = _solver.query_confidences(problem.provider, 0, raw, problem.grid.shape)
    ev = _solver.apply_confidences(raw, conf)
    return _solver.build_system(ev, _solver.layout_for(state, problem))


@_timed
def schur_audit(n: int = 20, seed: int = 0, lam: float = 1e-2) -> AuditResult:
    """Reduced (depth-eliminated) update against a dense solve of the full system.

    Both solves lose about cond(H) * eps; with three frames the bias block is
    weakly observed, so the damping ``lam`` sets the condition number.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n):
        inertial = bool(k % 2)
        state, problem = _small_problem(rng, 3, inertial)
        ne = normal_equations(state, problem)
        gauge = _solver.GaugeSpec(frozenset({0}), freeze_scale=not inertial)
        shape = problem.grid.shape
        delta = _solver.solve_step(ne, gauge, shape, lam)
        fp, fd = _solver.free_variables(ne.layout, gauge, shape)
        free = np.concatenate([fp, fd])
        H, g = ne.dense()
        Hf = H[np.ix_(free, free)] + lam * np.eye(int(free.sum()))
        ref = np.zeros_like(delta)
        ref[free] = np.linalg.solve(Hf, -g[free])
        worst = max(worst, rel_err(delta, ref, floor=1e-300))
    return AuditResult("schur", worst < SCHUR_TOL, worst, f"rel diff < {SCHUR_TOL:g}",
                       {"instances": n, "frames": 3, "depth_grid": [8, 8], "damping": lam})


# ---------------------------------------------------------------------------
# gauge


def null_count(H: np.ndarray, tol: float = NULL_TOL) -> tuple[int, np.ndarray]:
    """Near-zero eigenvalues of the Jacobi-equilibrated Hessian.

    Coordinates no residual touches (zero diagonal) are dropped first: they
    are unobserved, not gauge.  Diagonal scaling preserves the null space while
    removing the unit mismatch between pixel, velocity and bias-walk blocks.
    """
    keep = np.diag(H) > 0
    H = H[np.ix_(keep, keep)]
    s = 1.0 / np.sqrt(np.diag(H))
    Hs = H * s[:, None] * s[None, :]
    ev = np.linalg.eigvalsh(0.5 * (Hs + Hs.T))
    return int(np.sum(ev < tol * ev.max())), ev / ev.max()


def gauge_problem(inertial: bool, n_frames: int = 8, step: int = 5, seed: int = 0):
    """Noiseless synthetic keyframes at ground truth (full Hessian, nothing frozen).

    The motion is long and rotation-rich enough that the accelerometer bias is
    observable; over short windows it is only weakly so.
    """
    from .synth import SceneSpec, SyntheticWorld, TrajectorySpec
    spec = TrajectorySpec(kind="lissajous", duration=step * n_frames / 10.0,
                          wobble_amplitude=(0.3, 0.3, 0.3), wobble_frequency=(2.3, 2.9, 1.7),
                          seed=seed)
    world = SyntheticWorld(spec, SceneSpec(seed=seed + 1))
    frames = list(range(0, step * n_frames, step))
    edges = []
    for a in range(n_frames):
        for b in range(n_frames):
            if a != b and abs(a - b) <= 2:
                corr, _ = world.correspondence(frames[a], frames[b])
                edges.append(_solver.VisualEdge(a, b, corr))
    poses = [world.cam_poses[k] for k in frames]
    depths = np.stack([world.inverse_depth(k) for k in frames])
    motions, iedges, calib = None, [], None
    if inertial:
        calib = world.calib()
        motions = [MotionState(world.velocities[k]) for k in frames]
        t = world.times
        iedges = [_solver.InertialEdge(
            a, a + 1, _imu.preintegrate(world.imu_samples.slice(t[frames[a]], t[frames[a + 1]]),
                                        np.zeros(3), np.zeros(3), calib))
            for a in range(n_frames - 1)]
    factors = _solver.FactorSet(True, False, inertial)
    problem = _solver.Problem(world.K, world.grid, edges, factors, _factors.Uniform(), None,
                              iedges, calib)
    return _solver.StateVector(poses, depths, motions), problem


@_timed
def gauge_audit(seed: int = 0) -> AuditResult:
    """Visual-only mono BA has a 7-dimensional gauge; inertial factors leave 4."""
    counts, gaps = {}, {}
    for inertial in (False, True):
        state, problem = gauge_problem(inertial, seed=seed)
        H, _ = normal_equations(state, problem).dense()
        n, ev = null_count(H)
        key = "visual_inertial" if inertial else "visual"
        counts[key] = n
        gaps[key] = {"largest_null": float(ev[n - 1]) if n else None,
                     "smallest_observed": float(ev[n])}
    ok = counts["visual"] == 7 and counts["visual_inertial"] == 4
    return AuditResult("gauge", ok, float(counts["visual"]),
                       "7 null directions visual-only, 4 with inertial",
                       {"null_dims": counts, "relative_eigenvalues": gaps,
                        "tolerance": NULL_TOL})


# ---------------------------------------------------------------------------


AUDITS = {"jacobians": jacobian_audit, "preintegration": preintegration_audit,
          "schur": schur_audit, "gauge": gauge_audit}


def run_audits(names=None, quick: bool = False) -> AuditReport:
    """Run the named audits (all by default).  ``quick`` shrinks the sample counts."""
    names = list(AUDITS) if names is None else list(names)
    unknown = [n for n in names if n not in AUDITS]
    if unknown:
        raise KeyError(f"unknown audits: {', '.join(unknown)}")
    out = []
    for name in names:
        fn = AUDITS[name]
        if quick and name == "jacobians":
            res = fn(n=50)
        elif quick and name == "schur":
            res = fn(n=4)
        elif quick and name == "preintegration":
            res = fn(segments=2)
        else:
            res = fn()
        out.append(res)
    return AuditReport(out)
