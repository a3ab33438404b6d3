"""Frame graph, keyframe policy, initialization, sliding-window VIO and global BA."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .factors import (CorrespondenceField, ConfidenceProvider, FeatureMap, Uniform)
from .geometry import (CameraIntrinsics, PixelGrid, Pose, project, rotation_angle, se3_exp,
                       se3_log, so3_exp, so3_log)
from .imu import (ImuCalib, ImuSamples, MotionState, Preintegrated, corrected_deltas, merge,
                  preintegrate, propagate, repreintegrate)
from .solver import (FactorSet, GaugeSpec, InertialEdge, LmConfig, Problem, SolveResult,
                     StateVector, VisualEdge, lm_solve)

log = logging.getLogger(__name__)

MODES = ("mono", "stereo", "rgbd")


class InitializationError(RuntimeError):
    pass


class InsufficientExcitationError(InitializationError):
    pass


class GraphError(ValueError):
    pass


class FrameSource(Protocol):
    """What the pipeline consumes; :class:`mfdba.synth.SyntheticWorld` implements it."""

    K: CameraIntrinsics
    grid: PixelGrid
    times: np.ndarray

    @property
    def n_frames(self) -> int: ...
    @property
    def imu_samples(self) -> ImuSamples: ...
    @property
    def initial_pose(self) -> Pose: ...
    @property
    def initial_velocity(self) -> np.ndarray: ...
    def correspondence(self, i: int, j: int): ...
    def feature_map(self, k: int) -> FeatureMap: ...
    def measured_depth(self, k: int) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# graph


@dataclass(frozen=True)
class WindowConfig:
    size: int = 7
    flow_threshold: float = 2.5          # lattice pixels
    proximity_radius: float = 0.5        # metres-equivalent
    neighbors: int = 2                   # temporal edges per new keyframe
    max_interval: float = float("inf")   # seconds between keyframes
    rotation_weight: float = 0.5         # metres per radian in the proximity metric

    def __post_init__(self):
        if self.size < 3:
            raise ValueError("window must hold at least 3 keyframes")
        if not self.flow_threshold > 0 or not self.max_interval > 0:
            raise ValueError("keyframe thresholds must be positive")
        if self.proximity_radius < 0 or self.neighbors < 1:
            raise ValueError("invalid graph parameters")


@dataclass
class Keyframe:
    frame: int
    t: float
    pose: Pose
    depth: np.ndarray
    motion: MotionState | None = None
    features: FeatureMap | None = None
    observed: np.ndarray | None = None     # depth pixels constrained by some edge


@dataclass
class FrameGraph:
    """Keyframe vertices, directed visual edges and consecutive-pair IMU segments."""

    inertial: bool = False
    keyframes: dict = field(default_factory=dict)       # frame id -> Keyframe
    edges: dict = field(default_factory=dict)           # (i, j) -> CorrespondenceField
    imu: dict = field(default_factory=dict)             # (i, j) -> Preintegrated

    def ids(self) -> list[int]:
        return sorted(self.keyframes)

    def add_keyframe(self, kf: Keyframe, segment: Preintegrated | None = None) -> None:
        ids = self.ids()
        if ids:
            last = self.keyframes[ids[-1]]
            if kf.frame <= last.frame or kf.t <= last.t:
                raise GraphError("keyframe ids and timestamps must increase")
            if self.inertial:
                if segment is None:
                    raise GraphError("inertial graph needs an IMU segment for each new keyframe")
                self.imu[(last.frame, kf.frame)] = segment
        self.keyframes[kf.frame] = kf

    def add_edge(self, i: int, j: int, corr: CorrespondenceField) -> None:
        if i not in self.keyframes or j not in self.keyframes or i == j:
            raise GraphError(f"edge ({i}, {j}) references missing keyframes")
        self.edges[(i, j)] = corr

    def remove_keyframe(self, k: int, calib: ImuCalib | None = None) -> None:
        """Drop a vertex; adjacent IMU segments are merged by re-preintegration.

        Refuses removals that would disconnect the remaining graph.
        """
        ids = self.ids()
        if k not in self.keyframes:
            raise GraphError(f"no keyframe {k}")
        pos = ids.index(k)
        prev = ids[pos - 1] if pos > 0 else None
        nxt = ids[pos + 1] if pos + 1 < len(ids) else None
        bridged = self.inertial and prev is not None and nxt is not None
        links = [e for e in list(self.edges) + list(self.imu) if k not in e]
        if bridged:
            links.append((prev, nxt))
        if not _connected([m for m in ids if m != k], links):
            raise GraphError(f"removing keyframe {k} would disconnect the graph")
        before = self.imu.pop((prev, k), None)
        after = self.imu.pop((k, nxt), None)
        if before is not None and after is not None:
            if calib is None:
                raise GraphError("merging IMU segments needs the calibration")
            self.imu[(prev, nxt)] = merge(before, after, calib)
        self.edges = {e: c for e, c in self.edges.items() if k not in e}
        del self.keyframes[k]

    def imu_coverage(self) -> float:
        return sum(p.dt for p in self.imu.values())

    def audit(self) -> None:
        """Raise :class:`GraphError` if a structural invariant is violated."""
        ids = self.ids()
        for (a, b) in self.edges:
            if a not in self.keyframes or b not in self.keyframes:
                raise GraphError(f"edge ({a}, {b}) references a missing keyframe")
        consecutive = set(zip(ids[:-1], ids[1:]))
        if set(self.imu) - consecutive:
            raise GraphError("inertial edge between non-consecutive keyframes")
        if self.inertial:
            if consecutive - set(self.imu):
                raise GraphError("consecutive keyframes without an IMU segment")
            for (a, b), pre in self.imu.items():
                span = self.keyframes[b].t - self.keyframes[a].t
                if abs(pre.dt - span) > 1e-9:
                    raise GraphError(f"IMU segment ({a}, {b}) covers {pre.dt} s, gap is {span} s")


def _connected(ids: list[int], links) -> bool:
    if len(ids) <= 1:
        return True
    adj = {k: set() for k in ids}
    for a, b in links:
        adj[a].add(b)
        adj[b].add(a)
    seen, todo = {ids[0]}, [ids[0]]
    while todo:
        for m in adj[todo.pop()]:
            if m not in seen:
                seen.add(m)
                todo.append(m)
    return len(seen) == len(ids)


@dataclass(frozen=True)
class KeyframeDecision:
    is_keyframe: bool
    mean_flow: float | None
    reason: str


def keyframe_decision(corr: CorrespondenceField, grid: PixelGrid, threshold: float,
                      elapsed: float = 0.0, max_interval: float = float("inf")
                      ) -> KeyframeDecision:
    """Keyframe iff the mean flow from the latest keyframe exceeds ``threshold``."""
    flow = corr.mean_flow(grid)
    if flow is None:
        log.warning("no valid correspondences: treating frame as keyframe (tracking loss)")
        return KeyframeDecision(True, None, "tracking-loss")
    if flow > threshold:
        return KeyframeDecision(True, flow, "flow")
    if elapsed >= max_interval:
        return KeyframeDecision(True, flow, "interval")
    return KeyframeDecision(False, flow, "")


# ---------------------------------------------------------------------------
# visual-inertial initialization


@dataclass
class InitResult:
    state: StateVector
    calib: ImuCalib
    scale: float
    gravity: np.ndarray
    velocities: np.ndarray
    gyro_bias: np.ndarray
    segments: list[Preintegrated]
    condition: float
    solve: SolveResult | None = None


def estimate_gyro_bias(body_rotations: list[np.ndarray], segments: list[Preintegrated],
                       calib: ImuCalib, iterations: int = 4):
    """Least-squares gyro bias from relative rotation consistency."""
    bg = np.zeros(3)
    segs = list(segments)
    for _ in range(iterations):
        A, b = [], []
        for k, pre in enumerate(segs):
            dR, _, _ = corrected_deltas(pre, pre.ba_lin, bg)
            e = so3_log(dR.T @ body_rotations[k].T @ body_rotations[k + 1])
            A.append(pre.J_R_bg)
            b.append(e)
        delta = np.linalg.lstsq(np.vstack(A), np.concatenate(b), rcond=None)[0]
        bg = bg + delta
        segs = [repreintegrate(p, np.zeros(3), bg, calib) for p in segs]
        if np.linalg.norm(delta) < 1e-12:
            break
    return bg, segs


def _tangent_basis(n: np.ndarray) -> np.ndarray:
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b1 = np.cross(n, a)
    b1 /= np.linalg.norm(b1)
    return np.stack([b1, np.cross(n, b1)], axis=1)


def _equilibrated_cond(A: np.ndarray) -> float:
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        return float("inf")
    return float(np.linalg.cond(A / norms))


def linear_alignment(cam_poses: list[Pose], segments: list[Preintegrated], calib: ImuCalib,
                     with_scale: bool = True, gravity_dir: np.ndarray | None = None,
                     max_cond: float = 1e8):
    """Solve body velocities, gravity and (optionally) scale from preintegrated deltas.

    Positions are scaled about the first camera.  With ``gravity_dir`` given
    the gravity magnitude is held at ``|calib.gravity|`` and only a 2-d
    tangent correction is estimated.  Returns ``(v, g, s, cond)``.
    """
    n = len(cam_poses)
    if len(segments) != n - 1:
        raise InitializationError("one IMU segment per consecutive keyframe pair required")
    t_bc = calib.T_body_cam.t
    R_b = [T.R @ calib.T_body_cam.R.T for T in cam_poses]
    p0 = cam_poses[0].t
    q = [T.t - p0 for T in cam_poses]
    a = [p0 - R @ t_bc for R in R_b]
    G = float(np.linalg.norm(calib.gravity))
    ng = 3 if gravity_dir is None else 2
    ns = 1 if with_scale else 0
    cols = 3 * n + ng + ns
    A = np.zeros((6 * (n - 1), cols))
    b = np.zeros(6 * (n - 1))
    if gravity_dir is not None:
        B = _tangent_basis(gravity_dir)
        g0 = G * gravity_dir
    for k, pre in enumerate(segments):
        dt = pre.dt
        _, dv, dp = corrected_deltas(pre, np.zeros(3), pre.bg_lin)
        r = slice(6 * k, 6 * k + 3)
        rv = slice(6 * k + 3, 6 * k + 6)
        # position: s (q_j - q_i) - v_i dt - g dt^2 / 2 = R_i dp - (a_j - a_i)
        A[r, 3 * k:3 * k + 3] = -dt * np.eye(3)
        rhs_p = R_b[k] @ dp - (a[k + 1] - a[k])
        # velocity: v_j - v_i - g dt = R_i dv
        A[rv, 3 * k:3 * k + 3] = -np.eye(3)
        A[rv, 3 * k + 3:3 * k + 6] = np.eye(3)
        rhs_v = R_b[k] @ dv
        if gravity_dir is None:
            A[r, 3 * n:3 * n + 3] = -0.5 * dt * dt * np.eye(3)
            A[rv, 3 * n:3 * n + 3] = -dt * np.eye(3)
        else:
            A[r, 3 * n:3 * n + 2] = -0.5 * dt * dt * B
            A[rv, 3 * n:3 * n + 2] = -dt * B
            rhs_p = rhs_p + 0.5 * dt * dt * g0
            rhs_v = rhs_v + dt * g0
        if with_scale:
            A[r, -1] = q[k + 1] - q[k]
        else:
            rhs_p = rhs_p - (q[k + 1] - q[k])
        b[r] = rhs_p
        b[rv] = rhs_v
    cond = _equilibrated_cond(A)
    if not cond <= max_cond:
        raise InsufficientExcitationError(
            f"insufficient excitation: alignment condition number {cond:.3g}")
    x = np.linalg.lstsq(A, b, rcond=None)[0]
    v = x[:3 * n].reshape(n, 3)
    g = x[3 * n:3 * n + 3] if gravity_dir is None else g0 + B @ x[3 * n:3 * n + 2]
    s = float(x[-1]) if with_scale else 1.0
    return v, g, s, cond


def align_gravity(cam_poses, segments, calib, with_scale=True, iterations: int = 4):
    """Linear alignment followed by fixed-magnitude gravity refinement."""
    v, g, s, cond = linear_alignment(cam_poses, segments, calib, with_scale)
    if with_scale and not s > 0:
        raise InitializationError(f"alignment produced non-positive scale {s:.4g}")
    G = float(np.linalg.norm(calib.gravity))
    direction = g / np.linalg.norm(g)
    for _ in range(iterations):
        v, g, s, _ = linear_alignment(cam_poses, segments, calib, with_scale, direction)
        direction = g / np.linalg.norm(g)
    return v, G * direction, s, cond


def vi_initialize(state: StateVector, problem: Problem, segments: list[Preintegrated],
                  calib: ImuCalib, mode: str = "mono", lm: LmConfig = LmConfig(),
                  gauge: GaugeSpec | None = None) -> InitResult:
    """Inertial initialization of a visually optimized window.

    Estimates the gyro bias, then velocities, gravity and (in mono mode)
    scale by linear alignment, rescales the map, and runs a joint solve with
    all enabled factors.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if state.n < 3:
        raise InitializationError("initialization needs at least three keyframes")
    R_b = [calib.body_pose(T).R for T in state.poses]
    bg, segs = estimate_gyro_bias(R_b, segments, calib)
    with_scale = mode == "mono"
    v, g, s, cond = align_gravity(state.poses, segs, calib, with_scale)
    p0 = state.poses[0].t
    poses = [Pose(T.R, p0 + s * (T.t - p0)) for T in state.poses]
    depths = state.depths / s
    motions = [MotionState(v[k], np.zeros(3), bg) for k in range(state.n)]
    calib_g = calib.with_gravity(g)
    scaled = StateVector(poses, depths, motions)

    edges = [InertialEdge(k, k + 1, segs[k]) for k in range(state.n - 1)]
    joint = Problem(problem.K, problem.grid, problem.edges,
                    FactorSet(problem.factors.reproj, problem.factors.featmetric, True),
                    problem.provider, problem.features, edges, calib_g)
    if gauge is None:
        gauge = GaugeSpec(frozenset({0}), freeze_depths=(mode == "rgbd"))
    res = lm_solve(scaled, joint, gauge, lm)
    out = res.state
    # overall scale relative to the visual map, measured at the anchor pixel
    r, c = problem.grid.shape[0] // 2, problem.grid.shape[1] // 2
    scale = float(state.depths[0, r, c] / out.depths[0, r, c])
    final_bg = np.mean([m.bg for m in out.motions], axis=0)
    return InitResult(out, calib_g, scale, g, np.array([m.v for m in out.motions]), final_bg,
                      segs, cond, res)


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "mono"
    factors: FactorSet = field(default_factory=FactorSet)
    window: WindowConfig = field(default_factory=WindowConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    init_lm: LmConfig = field(default_factory=lambda: LmConfig(max_iter=40))
    global_lm: LmConfig = field(default_factory=lambda: LmConfig(max_iter=10))
    init_keyframes: int = 4
    init_span: int | None = None                # None: fully connected init graph
    init_inverse_depth: float = 0.3
    refine_nonkeyframes: bool | None = None     # default: refine in visual-only mode
    global_ba: bool = True
    freeze_oldest_motion: bool = True
    perturb_rotation: float = 0.0               # rad, on new keyframe predictions
    perturb_translation: float = 0.0            # m
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.init_span is not None and self.init_span < 1:
            raise ValueError("init_span must be >= 1")
        if self.init_keyframes < 3:
            raise ValueError("initialization needs at least 3 keyframes")
        if not self.init_inverse_depth > 0:
            raise ValueError("initial inverse depth must be positive")
        if self.perturb_rotation < 0 or self.perturb_translation < 0:
            raise ValueError("perturbations must be non-negative")

    @property
    def inertial(self) -> bool:
        return self.factors.inertial

    @property
    def refine(self) -> bool:
        if self.refine_nonkeyframes is None:
            return not self.inertial
        return self.refine_nonkeyframes


@dataclass
class SolveLog:
    label: str
    frame: int
    result: SolveResult


@dataclass
class RunResult:
    times: np.ndarray
    vio: list[Pose]
    slam: list[Pose] | None
    keyframes: list[int]
    graph: FrameGraph
    init: InitResult | None
    solves: list[SolveLog]
    window_sizes: list[int]
    calib: ImuCalib | None
    global_result: SolveResult | None = None


def _set_masks(provider, key, mask) -> None:
    masks = getattr(provider, "inlier_masks", None)
    if isinstance(masks, dict):
        masks[key] = mask
    for part in ("reproj", "feat", "imu"):
        sub = getattr(provider, part, None)
        if isinstance(sub, ConfidenceProvider) and sub is not provider:
            _set_masks(sub, key, mask)


class Pipeline:
    """Sliding-window VIO over a frame source, followed by optional global BA."""

    def __init__(self, source: FrameSource, config: PipelineConfig = PipelineConfig(),
                 provider: ConfidenceProvider | None = None, calib: ImuCalib | None = None):
        self.src = source
        self.cfg = config
        self.provider = provider if provider is not None else Uniform()
        if config.inertial:
            if calib is None:
                raise ValueError("inertial mode needs an IMU calibration")
            if getattr(source, "imu_samples", None) is None:
                raise ValueError("inertial mode needs an IMU stream")
        self.calib = calib
        self.graph = FrameGraph(inertial=config.inertial)
        self.window: list[int] = []
        self.ref: dict[int, tuple[int, Pose]] = {}     # frame -> (keyframe, relative pose)
        self.solves: list[SolveLog] = []
        self.window_sizes: list[int] = []
        self.init: InitResult | None = None
        self._rng = np.random.default_rng(config.seed)
        self._corr_cache: dict = {}

    # -- data access -------------------------------------------------------

    def correspondence(self, i: int, j: int) -> CorrespondenceField:
        key = (i, j)
        if key not in self._corr_cache:
            corr, mask = self.src.correspondence(i, j)
            _set_masks(self.provider, key, mask)
            self._corr_cache[key] = corr
        return self._corr_cache[key]

    def _features(self, k: int):
        return self.src.feature_map(k) if self.cfg.factors.featmetric else None

    def _initial_depth(self, k: int, like: np.ndarray | None = None) -> np.ndarray:
        if self.cfg.mode != "mono":
            return np.asarray(self.src.measured_depth(k), float)
        if like is not None:
            return np.full(self.src.grid.shape, float(np.median(like)))
        return np.full(self.src.grid.shape, self.cfg.init_inverse_depth)

    def _segment(self, i: int, j: int, motion: MotionState) -> Preintegrated:
        t = self.src.times
        samples = self.src.imu_samples.slice(float(t[i]), float(t[j]))
        return preintegrate(samples, motion.ba, motion.bg, self.calib, segment=f"{i}-{j}")

    def _problem(self, ids: list[int], edges: list[tuple[int, int]], inertial: bool,
                 imu: dict | None = None) -> Problem:
        index = {k: n for n, k in enumerate(ids)}
        vis = [VisualEdge(index[a], index[b], self.correspondence(a, b), key=(a, b))
               for a, b in edges]
        feats = [self._features(k) for k in ids] if self.cfg.factors.featmetric else None
        f = self.cfg.factors
        inertial_edges = []
        if inertial:
            imu = self.graph.imu if imu is None else imu
            inertial_edges = [InertialEdge(index[a], index[b], imu[(a, b)], key=("imu", a, b))
                              for a, b in zip(ids[:-1], ids[1:])]
        return Problem(self.src.K, self.src.grid, vis, FactorSet(f.reproj, f.featmetric, inertial),
                       self.provider, feats, inertial_edges, self.calib if inertial else None)

    def _state(self, ids: list[int]) -> StateVector:
        kfs = [self.graph.keyframes[k] for k in ids]
        motions = [kf.motion for kf in kfs] if self.cfg.inertial else None
        return StateVector([kf.pose for kf in kfs], np.stack([kf.depth for kf in kfs]), motions)

    def _write_back(self, ids: list[int], state: StateVector, edges=()) -> None:
        for n, k in enumerate(ids):
            kf = self.graph.keyframes[k]
            kf.pose = state.poses[n]
            kf.depth = state.depths[n]
            if state.motions is not None:
                kf.motion = state.motions[n]
            if self.cfg.mode != "mono":
                kf.observed = np.ones(self.src.grid.shape, dtype=bool)
                continue
            seen = np.zeros(self.src.grid.shape, dtype=bool)
            for a, b in edges:
                if a == k and b in self.graph.keyframes:
                    corr = self.correspondence(a, b)
                    _, ok = project(kf.pose, self.graph.keyframes[b].pose, kf.depth,
                                    self.src.grid.coords, self.src.K, in_image=False)
                    seen |= ok & corr.valid
            kf.observed = seen

    def _visual_gauge(self, frozen=frozenset({0})) -> GaugeSpec:
        mode = self.cfg.mode
        return GaugeSpec(frozenset(frozen), freeze_scale=(mode != "rgbd"),
                         freeze_depths=(mode == "rgbd"))

    # -- prediction --------------------------------------------------------

    def _velocity_twist(self) -> np.ndarray:
        if len(self.window) < 2:
            return np.zeros(6)
        a, b = (self.graph.keyframes[k] for k in self.window[-2:])
        return se3_log(a.pose.inverse() @ b.pose) / (b.t - a.t)

    def _predict(self, k: int):
        """Pose (and body velocity) of frame ``k`` from the latest keyframe."""
        ref = self.graph.keyframes[self.window[-1]]
        if self.cfg.inertial:
            pre = self._segment(ref.frame, k, ref.motion)
            T, v = propagate(ref.pose, ref.motion, pre, self.calib)
            return T, v, pre
        dt = float(self.src.times[k]) - ref.t
        return ref.pose @ se3_exp(self._velocity_twist() * dt), None, None

    def _perturb(self, T: Pose) -> Pose:
        c = self.cfg
        if c.perturb_rotation == 0 and c.perturb_translation == 0:
            return T
        ax = self._rng.normal(size=3)
        tr = self._rng.normal(size=3)
        return Pose(T.R @ so3_exp(c.perturb_rotation * ax / np.linalg.norm(ax)),
                    T.t + c.perturb_translation * tr / np.linalg.norm(tr))

    # -- stages ------------------------------------------------------------

    def _initialize(self, kf_frames: list[int]) -> None:
        src, cfg = self.src, self.cfg
        t = src.times
        poses = [src.initial_pose]
        motion0 = MotionState(src.initial_velocity) if cfg.inertial else None
        segments = []
        for a, b in zip(kf_frames[:-1], kf_frames[1:]):
            if cfg.inertial:
                pre = self._segment(a, b, MotionState())
                segments.append(pre)
                T, _ = propagate(src.initial_pose, motion0,
                                 self._segment(kf_frames[0], b, MotionState()), self.calib)
                poses.append(T)
            else:
                poses.append(poses[-1])
        depths = np.stack([self._initial_depth(k) for k in kf_frames])
        n = len(kf_frames)
        edges = [(kf_frames[a], kf_frames[b]) for a in range(n) for b in range(n)
                 if a != b and (cfg.init_span is None or abs(a - b) <= cfg.init_span)]
        problem = self._problem(kf_frames, edges, inertial=False)
        res = lm_solve(StateVector(poses, depths), problem, self._visual_gauge(), cfg.init_lm)
        self.solves.append(SolveLog("init-visual", kf_frames[-1], res))
        state = res.state
        if cfg.inertial:
            self.init = vi_initialize(state, problem, segments, self.calib, cfg.mode,
                                      cfg.init_lm)
            self.calib = self.init.calib
            self.solves.append(SolveLog("init-inertial", kf_frames[-1], self.init.solve))
            state = self.init.state
            segments = self.init.segments
        for n_, k in enumerate(kf_frames):
            kf = Keyframe(k, float(t[k]), state.poses[n_], state.depths[n_],
                          state.motions[n_] if state.motions is not None else None,
                          self._features(k))
            self.graph.add_keyframe(kf, segments[n_ - 1] if cfg.inertial and n_ > 0 else None)
            self.ref[k] = (k, Pose.identity())
        for a, b in edges:
            if abs(kf_frames.index(a) - kf_frames.index(b)) <= cfg.window.neighbors:
                self.graph.add_edge(a, b, self.correspondence(a, b))
        self._write_back(kf_frames, state, edges)
        self.window = list(kf_frames[-cfg.window.size:])
        self.window_sizes.append(len(self.window))

    def _add_keyframe(self, k: int) -> None:
        cfg = self.cfg
        prev = self.graph.keyframes[self.window[-1]]
        T, v, pre = self._predict(k)
        T = self._perturb(T)
        motion = None
        if cfg.inertial:
            motion = MotionState(v, prev.motion.ba, prev.motion.bg)
        kf = Keyframe(k, float(self.src.times[k]), T, self._initial_depth(k, prev.depth),
                      motion, self._features(k))
        if len(self.window) >= cfg.window.size:
            self.window.pop(0)
        self.graph.add_keyframe(kf, pre)
        for m in self.window[-cfg.window.neighbors:]:
            self.graph.add_edge(m, k, self.correspondence(m, k))
            self.graph.add_edge(k, m, self.correspondence(k, m))
        self.window.append(k)
        self.ref[k] = (k, Pose.identity())
        self._solve_window(k)
        self.window_sizes.append(len(self.window))

    def _solve_window(self, k: int) -> None:
        ids = list(self.window)
        inside = set(ids)
        edges = [e for e in self.graph.edges if e[0] in inside and e[1] in inside]
        problem = self._problem(ids, edges, self.cfg.inertial)
        rgbd = self.cfg.mode == "rgbd"
        if self.cfg.inertial:
            # the oldest velocity stands in for the dropped marginalization prior;
            # without it the window's joint bias level absorbs visual noise
            hold = frozenset({0})
            gauge = (GaugeSpec(hold, frozen_motions=hold, freeze_depths=rgbd)
                     if self.cfg.freeze_oldest_motion else
                     GaugeSpec(hold, frozen_velocities=hold, freeze_depths=rgbd))
        else:
            gauge = GaugeSpec(frozenset({0, 1}), freeze_depths=rgbd)
        res = lm_solve(self._state(ids), problem, gauge, self.cfg.lm)
        self.solves.append(SolveLog("window", k, res))
        self._write_back(ids, res.state, edges)

    def _track(self, k: int, refine: bool | None = None) -> None:
        """Non-keyframe pose, stored relative to the latest keyframe."""
        ref = self.graph.keyframes[self.window[-1]]
        T, _, _ = self._predict(k)
        if self.cfg.refine if refine is None else refine:
            corr = self.correspondence(ref.frame, k)
            if ref.observed is not None and ref.observed.sum() >= 8:
                corr = CorrespondenceField(corr.target, corr.valid & ref.observed)
            problem = Problem(self.src.K, self.src.grid,
                              [VisualEdge(0, 1, corr, key=(ref.frame, k))],
                              FactorSet(self.cfg.factors.reproj, self.cfg.factors.featmetric),
                              self.provider,
                              [ref.features, self._features(k)]
                              if self.cfg.factors.featmetric else None)
            state = StateVector([ref.pose, T], np.stack([ref.depth, ref.depth]))
            res = lm_solve(state, problem, GaugeSpec(frozenset({0}), freeze_depths=True),
                           self.cfg.lm)
            self.solves.append(SolveLog("track", k, res))
            T = res.state.poses[1]
        self.ref[k] = (ref.frame, ref.pose.inverse() @ T)

    def run(self) -> RunResult:
        src, cfg = self.src, self.cfg
        n = src.n_frames
        t = src.times
        init_frames = [0]
        pending: list[int] = []
        for k in range(1, n):
            last = self.window[-1] if self.window else init_frames[-1]
            dec = keyframe_decision(self.correspondence(last, k), src.grid,
                                    cfg.window.flow_threshold, float(t[k] - t[last]),
                                    cfg.window.max_interval)
            if not self.window:
                if dec.is_keyframe:
                    init_frames.append(k)
                else:
                    pending.append(k)
                if len(init_frames) == cfg.init_keyframes:
                    self._initialize(init_frames)
                    self._track_pending(pending)
                continue
            if dec.is_keyframe:
                self._add_keyframe(k)
            else:
                self._track(k)
        if not self.window:
            raise InitializationError(
                f"only {len(init_frames)} keyframes in {n} frames; "
                f"{cfg.init_keyframes} needed to initialize")
        self.graph.audit()
        vio = self.poses({k: kf.pose for k, kf in self.graph.keyframes.items()})
        slam, gres = None, None
        if cfg.global_ba:
            kf_poses, gres = self.global_ba()
            slam = self.poses(kf_poses)
        return RunResult(np.asarray(t, float), vio, slam, self.graph.ids(), self.graph,
                         self.init, self.solves, self.window_sizes, self.calib, gres)

    def _track_pending(self, pending: list[int]) -> None:
        ids = self.graph.ids()
        for k in pending:
            ref = max(m for m in ids if m < k)
            saved = self.window
            self.window = [m for m in ids if m <= ref]
            self._track(k)
            self.window = saved

    def poses(self, kf_poses: dict) -> list[Pose]:
        return [kf_poses[r] @ rel for _, (r, rel) in sorted(self.ref.items())]

    # -- global BA ---------------------------------------------------------

    def global_edges(self, radius: float | None = None) -> list[tuple[int, int]]:
        w = self.cfg.window
        radius = w.proximity_radius if radius is None else radius
        ids = self.graph.ids()
        edges = []
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                i, j = ids[a], ids[b]
                if b - a <= w.neighbors:
                    edges += [(i, j), (j, i)]
                    continue
                Ti, Tj = self.graph.keyframes[i].pose, self.graph.keyframes[j].pose
                dist = np.linalg.norm(Ti.t - Tj.t) + w.rotation_weight * rotation_angle(
                    Ti.R.T @ Tj.R)
                if dist < radius:
                    c1, c2 = self.correspondence(i, j), self.correspondence(j, i)
                    if c1.valid.mean() >= 0.5 and c2.valid.mean() >= 0.5:
                        edges += [(i, j), (j, i)]
        return edges

    def global_ba(self, radius: float | None = None):
        """Full-graph solve over all keyframes with temporal and proximity edges."""
        ids = self.graph.ids()
        edges = self.global_edges(radius)
        problem = self._problem(ids, edges, self.cfg.inertial)
        if self.cfg.inertial:
            gauge = GaugeSpec(frozenset({0}), freeze_depths=(self.cfg.mode == "rgbd"))
        else:
            gauge = self._visual_gauge()
        res = lm_solve(self._state(ids), problem, gauge, self.cfg.global_lm)
        self.solves.append(SolveLog("global", ids[-1], res))
        return {k: res.state.poses[n] for n, k in enumerate(ids)}, res


def run_pipeline(source: FrameSource, config: PipelineConfig = PipelineConfig(),
                 provider: ConfidenceProvider | None = None,
                 calib: ImuCalib | None = None) -> RunResult:
    return Pipeline(source, config, provider, calib).run()
