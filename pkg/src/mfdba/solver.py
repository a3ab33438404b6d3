"""Multi-factor dense bundle adjustment.

Unknowns are keyframe poses (6 dof each), optional motion states (9 each)
and one inverse depth per lattice pixel of every keyframe.  Each inverse
depth is observed only by residuals whose source pixel it is, so the depth
block of the Gauss-Newton Hessian is diagonal and is eliminated pixel by
pixel before solving the pose/motion system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .factors import (ConfidenceMaps, ConfidenceProvider, CorrespondenceField, FeatureMap,
                      ResidualSnapshot, TermEval, Uniform, featuremetric_term,
                      reprojection_term)
from .geometry import CameraIntrinsics, PixelGrid, Pose
from .imu import ImuCalib, MotionState, Preintegrated, inertial_residual

log = logging.getLogger(__name__)

MIN_INVERSE_DEPTH = 1e-6


class StructuralError(ValueError):
    pass


class GaugeError(ValueError):
    pass


class RankDeficientError(np.linalg.LinAlgError):
    pass


class DampingError(ArithmeticError):
    """A damped depth pivot is not positive; the caller should raise damping."""


class SolverDivergedError(RuntimeError):
    pass


@dataclass
class StateVector:
    poses: list[Pose]
    depths: np.ndarray                     # (n, rows, cols)
    motions: list[MotionState] | None = None

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=float)
        if len(self.poses) != self.depths.shape[0]:
            raise StructuralError("one depth grid per keyframe required")
        if self.motions is not None and len(self.motions) != len(self.poses):
            raise StructuralError("one motion state per keyframe required")

    @property
    def n(self) -> int:
        return len(self.poses)

    def copy(self) -> "StateVector":
        motions = None if self.motions is None else list(self.motions)
        return StateVector(list(self.poses), self.depths.copy(), motions)


@dataclass(frozen=True)
class GaugeSpec:
    """Variables held fixed during a solve.

    ``freeze_scale`` pins one inverse depth (``anchor`` = keyframe, row, col;
    default: centre pixel of the lowest frozen keyframe), which removes the
    monocular scale freedom.
    """

    frozen_poses: frozenset = frozenset({0})
    freeze_scale: bool = False
    frozen_motions: frozenset = frozenset()
    frozen_velocities: frozenset = frozenset()     # velocity only; biases stay free
    freeze_depths: bool = False
    anchor: tuple | None = None

    def anchor_pixel(self, shape: tuple[int, int]) -> tuple[int, int, int]:
        if self.anchor is not None:
            return self.anchor
        k = min(self.frozen_poses) if self.frozen_poses else 0
        return (k, shape[0] // 2, shape[1] // 2)


@dataclass(frozen=True)
class LmConfig:
    lam0: float = 1e-4
    up: float = 10.0
    down: float = 0.5
    max_iter: int = 15
    cost_tol: float = 1e-8
    step_tol: float = 1e-12
    abs_cost_tol: float = 1e-24

    def __post_init__(self):
        if not self.lam0 > 0 or not self.up > 1 or not 0 < self.down < 1:
            raise ValueError("invalid damping parameters")


@dataclass(frozen=True)
class FactorSet:
    reproj: bool = True
    featmetric: bool = False
    inertial: bool = False

    def __post_init__(self):
        if not (self.reproj or self.featmetric):
            raise ValueError("at least one visual factor must be enabled")


@dataclass
class VisualEdge:
    i: int
    j: int
    corr: CorrespondenceField | None = None
    key: object = None

    @property
    def id(self):
        return self.key if self.key is not None else (self.i, self.j)


@dataclass
class InertialEdge:
    i: int
    j: int
    pre: Preintegrated
    key: object = None

    @property
    def id(self):
        return self.key if self.key is not None else ("imu", self.i, self.j)


@dataclass
class Problem:
    K: CameraIntrinsics
    grid: PixelGrid
    edges: list[VisualEdge]
    factors: FactorSet = field(default_factory=FactorSet)
    provider: ConfidenceProvider = field(default_factory=Uniform)
    features: list[FeatureMap] | None = None
    inertial_edges: list[InertialEdge] = field(default_factory=list)
    calib: ImuCalib | None = None

    def validate(self, state: StateVector) -> None:
        n = state.n
        for e in self.edges:
            if not (0 <= e.i < n and 0 <= e.j < n) or e.i == e.j:
                raise StructuralError(f"edge {e.id} references invalid keyframes")
            if self.factors.reproj and e.corr is None:
                raise StructuralError(f"edge {e.id} has no correspondence field")
            if e.corr is not None and e.corr.target.shape[:2] != self.grid.shape:
                raise StructuralError(f"edge {e.id}: correspondence shape mismatch")
        if state.depths.shape[1:] != self.grid.shape:
            raise StructuralError("depth grids do not match the lattice")
        if self.factors.featmetric:
            if self.features is None or len(self.features) != n:
                raise StructuralError("feature-metric term needs one feature map per keyframe")
        if self.factors.inertial:
            if state.motions is None or self.calib is None:
                raise StructuralError("inertial term needs motion states and calibration")
            for e in self.inertial_edges:
                if e.j != e.i + 1:
                    raise StructuralError(
                        f"inertial edge {e.id} is not between consecutive keyframes")


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EdgeTerms:
    edge: VisualEdge
    reproj: TermEval | None
    feat: TermEval | None


@dataclass
class InertialTerm:
    edge: InertialEdge
    r: np.ndarray
    J: np.ndarray | None
    W: np.ndarray

    @property
    def cost(self) -> float:
        return float(self.r @ self.W @ self.r)


@dataclass
class Evaluation:
    visual: list[EdgeTerms]
    inertial: list[InertialTerm]
    confidences: dict

    def costs(self) -> dict[str, float]:
        c = {"reproj": 0.0, "featmetric": 0.0, "inertial": 0.0}
        for t in self.visual:
            if t.reproj is not None:
                c["reproj"] += t.reproj.cost
            if t.feat is not None:
                c["featmetric"] += t.feat.cost
        for t in self.inertial:
            c["inertial"] += t.cost
        return c

    @property
    def cost(self) -> float:
        return sum(self.costs().values())

    def mean_confidence(self) -> tuple[float, float, float]:
        wr, wf, wu = [], [], []
        for t in self.visual:
            maps = self.confidences.get(t.edge.id)
            if maps is None:
                continue
            m = (t.reproj or t.feat).valid
            wr.append(maps.w_r.reshape(-1, 2)[m].ravel())
            wf.append(maps.w_f.reshape(-1)[m])
        for t in self.inertial:
            maps = self.confidences.get(t.edge.id)
            if maps is not None:
                wu.append(maps.w_u)
        mean = lambda parts: float(np.mean(np.concatenate(parts))) if parts and sum(
            len(p) for p in parts) else 0.0
        return mean(wr), mean(wf), float(np.mean(wu)) if wu else 0.0


def evaluate_terms(state: StateVector, problem: Problem) -> Evaluation:
    """Unit-weight evaluation of every active term (weights are masks only)."""
    K, grid, f = problem.K, problem.grid, problem.factors
    visual = []
    for e in problem.edges:
        Ti, Tj, d = state.poses[e.i], state.poses[e.j], state.depths[e.i]
        rep = reprojection_term(Ti, Tj, d, e.corr, 1.0, grid, K) if f.reproj else None
        feat = None
        if f.featmetric:
            feat = featuremetric_term(Ti, Tj, d, problem.features[e.i], problem.features[e.j],
                                      1.0, grid, K)
        visual.append(EdgeTerms(e, rep, feat))
    inertial = []
    if f.inertial:
        for e in problem.inertial_edges:
            r, J, W = inertial_residual(state.poses[e.i], state.motions[e.i],
                                        state.poses[e.j], state.motions[e.j],
                                        e.pre, problem.calib, 1.0)
            inertial.append(InertialTerm(e, r, J, W))
    return Evaluation(visual, inertial, {})


def snapshot_for(terms: EdgeTerms | InertialTerm, shape) -> ResidualSnapshot:
    if isinstance(terms, InertialTerm):
        return ResidualSnapshot(shape, inertial=terms.r)
    rep = None if terms.reproj is None else terms.reproj.residual.reshape(shape + (2,))
    feat = None
    if terms.feat is not None:
        feat = terms.feat.residual.reshape(shape + (-1,))
    return ResidualSnapshot(shape, rep, feat)


def query_confidences(provider: ConfidenceProvider, iteration: int, ev: Evaluation,
                      shape) -> dict:
    out = {}
    for t in ev.visual:
        maps = provider(iteration, t.edge.id, snapshot_for(t, shape))
        maps.check()
        out[t.edge.id] = maps
    for t in ev.inertial:
        maps = provider(iteration, t.edge.id, snapshot_for(t, shape))
        if maps.w_u < 0:
            raise ValueError("negative inertial confidence")
        out[t.edge.id] = maps
    return out


def apply_confidences(raw: Evaluation, conf: dict) -> Evaluation:
    """Weighted copy of a unit-weight evaluation."""
    visual = []
    for t in raw.visual:
        maps: ConfidenceMaps = conf[t.edge.id]
        rep = feat = None
        if t.reproj is not None:
            rep = replace(t.reproj, weight=t.reproj.weight * maps.w_r.reshape(-1, 2))
        if t.feat is not None:
            feat = replace(t.feat, weight=t.feat.weight * maps.w_f.reshape(-1, 1))
        visual.append(EdgeTerms(t.edge, rep, feat))
    inertial = [replace(t, W=t.W * conf[t.edge.id].w_u) for t in raw.inertial]
    return Evaluation(visual, inertial, conf)


# ---------------------------------------------------------------------------
# normal equations


@dataclass
class Layout:
    n: int
    pixels: int
    motions: bool

    @property
    def pose_dim(self) -> int:
        return 6 * self.n + (9 * self.n if self.motions else 0)

    def pose(self, k: int) -> slice:
        return slice(6 * k, 6 * k + 6)

    def motion(self, k: int) -> slice:
        base = 6 * self.n
        return slice(base + 9 * k, base + 9 * k + 9)

    def depth(self, k: int) -> slice:
        return slice(self.pixels * k, self.pixels * (k + 1))


@dataclass
class NormalEquations:
    """``H = J^T W J`` and ``g = J^T W r`` split into pose/motion and depth parts."""

    layout: Layout
    Hpp: np.ndarray
    Hpd: np.ndarray
    Hdd: np.ndarray
    gp: np.ndarray
    gd: np.ndarray

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        npd = self.Hpp.shape[0]
        nd = self.Hdd.shape[0]
        H = np.zeros((npd + nd, npd + nd))
        H[:npd, :npd] = self.Hpp
        H[:npd, npd:] = self.Hpd
        H[npd:, :npd] = self.Hpd.T
        H[npd:, npd:] = np.diag(self.Hdd)
        return H, np.concatenate([self.gp, self.gd])

    def __add__(self, other: "NormalEquations") -> "NormalEquations":
        return NormalEquations(self.layout, self.Hpp + other.Hpp, self.Hpd + other.Hpd,
                               self.Hdd + other.Hdd, self.gp + other.gp, self.gd + other.gd)


def _add_visual(ne: NormalEquations, e: VisualEdge, t: TermEval):
    L = ne.layout
    A, B, D, w, r = t.J_i, t.J_j, t.J_d, t.weight, t.residual
    wA = A * w[..., None]
    wB = B * w[..., None]
    pi, pj, di = L.pose(e.i), L.pose(e.j), L.depth(e.i)
    ne.Hpp[pi, pi] += np.einsum("pmk,pml->kl", wA, A)
    ne.Hpp[pj, pj] += np.einsum("pmk,pml->kl", wB, B)
    Hij = np.einsum("pmk,pml->kl", wA, B)
    ne.Hpp[pi, pj] += Hij
    ne.Hpp[pj, pi] += Hij.T
    ne.Hpd[pi, di] += np.einsum("pmk,pm->kp", wA, D)
    ne.Hpd[pj, di] += np.einsum("pmk,pm->kp", wB, D)
    ne.Hdd[di] += np.einsum("pm,pm->p", w * D, D)
    ne.gp[pi] += np.einsum("pmk,pm->k", wA, r)
    ne.gp[pj] += np.einsum("pmk,pm->k", wB, r)
    ne.gd[di] += np.einsum("pm,pm->p", w * D, r)


def _add_inertial(ne: NormalEquations, t: InertialTerm):
    L = ne.layout
    e = t.edge
    idx = np.r_[np.arange(6 * e.i, 6 * e.i + 6),
                np.arange(L.motion(e.i).start, L.motion(e.i).stop),
                np.arange(6 * e.j, 6 * e.j + 6),
                np.arange(L.motion(e.j).start, L.motion(e.j).stop)]
    JW = t.J.T @ t.W
    ne.Hpp[np.ix_(idx, idx)] += JW @ t.J
    ne.gp[idx] += JW @ t.r


def build_system(ev: Evaluation, layout: Layout) -> NormalEquations:
    """Gauss-Newton normal equations from weighted term evaluations."""
    npd = layout.pose_dim
    nd = layout.n * layout.pixels
    ne = NormalEquations(layout, np.zeros((npd, npd)), np.zeros((npd, nd)), np.zeros(nd),
                         np.zeros(npd), np.zeros(nd))
    for t in ev.visual:
        for term in (t.reproj, t.feat):
            if term is None:
                continue
            if term.residual.shape[0] != layout.pixels:
                raise StructuralError(f"edge {t.edge.id}: term has {term.residual.shape[0]} "
                                      f"pixels, layout expects {layout.pixels}")
            _add_visual(ne, t.edge, term)
    for t in ev.inertial:
        if not layout.motions:
            raise StructuralError(f"edge {t.edge.id}: inertial term without motion states")
        if t.J.shape != (15, 30):
            raise StructuralError(f"edge {t.edge.id}: inertial Jacobian has shape {t.J.shape}")
        _add_inertial(ne, t)
    return ne


def free_variables(layout: Layout, gauge: GaugeSpec, shape) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks over pose/motion coordinates and depth coordinates."""
    fp = np.ones(layout.pose_dim, dtype=bool)
    for k in gauge.frozen_poses:
        if 0 <= k < layout.n:
            fp[layout.pose(k)] = False
    if layout.motions:
        for k in gauge.frozen_motions:
            if 0 <= k < layout.n:
                fp[layout.motion(k)] = False
        for k in gauge.frozen_velocities:
            if 0 <= k < layout.n:
                fp[layout.motion(k).start:layout.motion(k).start + 3] = False
    fd = np.ones(layout.n * layout.pixels, dtype=bool)
    if gauge.freeze_depths:
        fd[:] = False
    elif gauge.freeze_scale:
        k, r, c = gauge.anchor_pixel(shape)
        fd[layout.pixels * k + r * shape[1] + c] = False
    return fp, fd


@dataclass
class ReducedSystem:
    S: np.ndarray
    b: np.ndarray
    back_substitute: object    # callable: pose/motion update -> depth update


def schur_reduce(ne: NormalEquations, fp: np.ndarray, fd: np.ndarray,
                 lam: float = 0.0) -> ReducedSystem:
    """Eliminate inverse depths.

    Returns the reduced system ``S dx = b`` over free pose/motion coordinates
    and a closure mapping ``dx`` to the free depth update.
    """
    Hpp = ne.Hpp[np.ix_(fp, fp)] + lam * np.eye(int(fp.sum()))
    Hpd = ne.Hpd[np.ix_(fp, fd)]
    C = ne.Hdd[fd] + lam
    gp, gd = ne.gp[fp], ne.gd[fd]
    observed = C > 0.0
    if np.any(C < 0.0) or (lam > 0.0 and not np.all(observed)):
        raise DampingError("non-positive damped depth pivot")
    Cinv = np.where(observed, 1.0 / np.where(observed, C, 1.0), 0.0)
    HC = Hpd * Cinv
    S = Hpp - HC @ Hpd.T
    b = -gp + HC @ gd

    def back_substitute(dx):
        return -Cinv * (gd + Hpd.T @ dx)

    return ReducedSystem(0.5 * (S + S.T), b, back_substitute)


RANK_TOL = 1e-12


def solve_reduced(red: ReducedSystem) -> np.ndarray:
    """Cholesky solve of the reduced system after Jacobi equilibration.

    Scaling makes the pivot test independent of the units of the blocks
    (pixels versus bias random-walk information).
    """
    if red.S.shape[0] == 0:
        return np.zeros(0)
    diag = np.diag(red.S)
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise RankDeficientError("reduced system has a non-positive diagonal "
                                 "(gauge not fixed?)")
    s = 1.0 / np.sqrt(diag)
    S = red.S * s[:, None] * s[None, :]
    try:
        c, low = cho_factor(S, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise RankDeficientError("reduced system is not positive definite "
                                 "(gauge not fixed?)") from exc
    pivots = np.diag(c) ** 2
    if pivots.min() < RANK_TOL:
        raise RankDeficientError(f"reduced system is rank deficient: pivot ratio "
                                 f"{pivots.min():.2e} (gauge not fixed?)")
    return s * cho_solve((c, low), s * red.b)


def solve_step(ne: NormalEquations, gauge: GaugeSpec, shape, lam: float) -> np.ndarray:
    """Full update vector (zeros on frozen coordinates)."""
    fp, fd = free_variables(ne.layout, gauge, shape)
    red = schur_reduce(ne, fp, fd, lam)
    dx = solve_reduced(red)
    delta = np.zeros(fp.size + fd.size)
    delta[:fp.size][fp] = dx
    delta[fp.size:][fd] = red.back_substitute(dx)
    return delta


def retract(state: StateVector, delta: np.ndarray, gauge: GaugeSpec,
            layout: Layout | None = None) -> StateVector:
    """Apply an update: poses by local SE(3) exp, motions and depths additively."""
    if layout is None:
        layout = Layout(state.n, state.depths[0].size, state.motions is not None)
    expected = layout.pose_dim + layout.n * layout.pixels
    if delta.shape != (expected,):
        raise StructuralError(f"update has shape {delta.shape}, expected ({expected},)")
    if not np.any(delta):
        return state.copy()
    out = state.copy()
    for k in range(state.n):
        if k in gauge.frozen_poses:
            continue
        xi = delta[layout.pose(k)]
        if np.any(xi):
            out.poses[k] = state.poses[k].retract(xi)
    if layout.motions:
        for k in range(state.n):
            if k in gauge.frozen_motions:
                continue
            dm = delta[layout.motion(k)]
            if k in gauge.frozen_velocities:
                dm = np.concatenate([np.zeros(3), dm[3:]])
            if np.any(dm):
                out.motions[k] = MotionState.from_vector(state.motions[k].vector() + dm)
    if not gauge.freeze_depths:
        dd = delta[layout.pose_dim:].reshape(state.depths.shape)
        if gauge.freeze_scale:
            k, r, c = gauge.anchor_pixel(state.depths.shape[1:])
            dd = dd.copy()
            dd[k, r, c] = 0.0
        changed = dd != 0.0
        out.depths = np.where(changed, np.maximum(state.depths + dd, MIN_INVERSE_DEPTH),
                              state.depths)
    return out


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass
class TraceRow:
    iteration: int
    cost_reproj: float
    cost_featmetric: float
    cost_inertial: float
    mean_w_r: float
    mean_w_f: float
    w_u: float
    lam: float
    accepted: bool

    @property
    def cost(self) -> float:
        return self.cost_reproj + self.cost_featmetric + self.cost_inertial


@dataclass
class SolveResult:
    state: StateVector
    trace: list[TraceRow]
    converged: bool
    iterations: int
    initial_cost: float
    final_cost: float

    @property
    def accepted(self) -> int:
        return sum(r.accepted for r in self.trace)


def check_gauge(problem: Problem, gauge: GaugeSpec, n: int) -> None:
    frozen = [k for k in gauge.frozen_poses if 0 <= k < n]
    if not frozen and not problem.factors.inertial:
        raise GaugeError("no frozen pose and no inertial factor: 6-dof gauge is free")
    scale_fixed = gauge.freeze_scale or gauge.freeze_depths or len(frozen) >= 2
    if not problem.factors.inertial and not scale_fixed and n > 1:
        raise GaugeError("visual-only problem needs a scale anchor or two frozen poses")


def layout_for(state: StateVector, problem: Problem) -> Layout:
    return Layout(state.n, problem.grid.size, problem.factors.inertial)


def lm_solve(state: StateVector, problem: Problem, gauge: GaugeSpec,
             cfg: LmConfig = LmConfig()) -> SolveResult:
    """Damped Gauss-Newton over the frame graph with per-iteration confidences."""
    problem.validate(state)
    check_gauge(problem, gauge, state.n)
    layout = layout_for(state, problem)
    shape = problem.grid.shape
    settles_at = getattr(problem.provider, "settles_at", 0)
    lam = cfg.lam0
    trace: list[TraceRow] = []
    converged = False
    raw = evaluate_terms(state, problem)
    initial_cost = None
    it = 0
    for it in range(cfg.max_iter):
        conf = query_confidences(problem.provider, it, raw, shape)
        ev = apply_confidences(raw, conf)
        cost = ev.cost
        if not np.isfinite(cost):
            raise SolverDivergedError(f"non-finite cost at iteration {it}")
        if initial_cost is None:
            initial_cost = cost
        mw = ev.mean_confidence()
        c = ev.costs()
        if cost <= cfg.abs_cost_tol and it >= settles_at:
            trace.append(TraceRow(it, c["reproj"], c["featmetric"], c["inertial"], *mw, lam,
                                  False))
            converged = True
            break
        ne = build_system(ev, layout)
        try:
            delta = solve_step(ne, gauge, shape, lam)
        except DampingError:
            trace.append(TraceRow(it, c["reproj"], c["featmetric"], c["inertial"], *mw, lam,
                                  False))
            lam *= cfg.up
            continue
        trial = retract(state, delta, gauge, layout)
        trial_raw = evaluate_terms(trial, problem)
        tev = apply_confidences(trial_raw, conf)
        new_cost = tev.cost
        accepted = bool(np.isfinite(new_cost) and new_cost < cost)
        if accepted:
            c = tev.costs()
        trace.append(TraceRow(it, c["reproj"], c["featmetric"], c["inertial"], *mw, lam, accepted))
        if accepted:
            state, raw = trial, trial_raw
            lam = max(lam * cfg.down, 1e-12)
            small = cost - new_cost <= cfg.cost_tol * cost or np.linalg.norm(delta) <= cfg.step_tol
            if small and it >= settles_at:
                converged = True
                break
        else:
            lam *= cfg.up
    final_cost = trace[-1].cost if trace else 0.0
    return SolveResult(state, trace, converged, it + 1, initial_cost or 0.0, final_cost)
