"""Confidence-weighted visual terms and the confidence providers.

Both visual terms are evaluated on the lattice of the source keyframe and
return per-pixel residuals, weights and Jacobians with the pixel axis
flattened (row-major).  Pixels whose projection is invalid carry zero weight,
zero residual and zero Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, PixelGrid, Pose, project_jacobians


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class CorrespondenceField:
    """Target coordinates of every lattice pixel of view i in view j."""

    target: np.ndarray          # (rows, cols, 2), full-resolution pixels
    valid: np.ndarray           # (rows, cols) bool

    def __post_init__(self):
        target = np.asarray(self.target, dtype=float)
        valid = np.asarray(self.valid, dtype=bool)
        if target.shape[:-1] != valid.shape or target.shape[-1] != 2:
            raise DimensionError(f"target {target.shape} does not match mask {valid.shape}")
        if not np.all(np.isfinite(target[valid])):
            raise ValueError("non-finite correspondence at a valid pixel")
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "valid", valid)

    def mean_flow(self, grid: PixelGrid) -> float | None:
        """Mean displacement of valid pixels in lattice units."""
        if not self.valid.any():
            return None
        disp = self.target - grid.coords
        return float(np.linalg.norm(disp[self.valid], axis=-1).mean() / grid.stride)


class FeatureMap:
    """Dense per-pixel feature vectors with bilinear sampling."""

    def __init__(self, data: np.ndarray):
        data = np.asarray(data, dtype=float)
        if data.ndim != 3:
            raise DimensionError("feature map must be (height, width, channels)")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map has non-finite entries")
        self.data = data

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def _corners(self, uv):
        h, w = self.shape
        u = np.clip(uv[..., 0], 0.0, w - 1.0)
        v = np.clip(uv[..., 1], 0.0, h - 1.0)
        u0 = np.minimum(np.floor(u).astype(int), w - 2)
        v0 = np.minimum(np.floor(v).astype(int), h - 2)
        a = (u - u0)[..., None]
        b = (v - v0)[..., None]
        D = self.data
        return D[v0, u0], D[v0, u0 + 1], D[v0 + 1, u0], D[v0 + 1, u0 + 1], a, b

    def sample(self, uv: np.ndarray) -> np.ndarray:
        f00, f10, f01, f11, a, b = self._corners(uv)
        return (1 - a) * (1 - b) * f00 + a * (1 - b) * f10 + (1 - a) * b * f01 + a * b * f11

    def sample_with_gradient(self, uv: np.ndarray):
        """Values (..., C) and the exact derivative of the interpolant (..., C, 2)."""
        f00, f10, f01, f11, a, b = self._corners(uv)
        val = (1 - a) * (1 - b) * f00 + a * (1 - b) * f10 + (1 - a) * b * f01 + a * b * f11
        du = (1 - b) * (f10 - f00) + b * (f11 - f01)
        dv = (1 - a) * (f01 - f00) + a * (f11 - f10)
        return val, np.stack([du, dv], axis=-1)


@dataclass
class TermEval:
    """Per-pixel evaluation of one visual term on one edge.

    ``residual`` and ``weight`` are (P, m); Jacobians are (P, m, 6) for the
    two poses and (P, m) for the source inverse depth.
    """

    residual: np.ndarray
    weight: np.ndarray
    J_i: np.ndarray
    J_j: np.ndarray
    J_d: np.ndarray
    valid: np.ndarray

    @property
    def cost(self) -> float:
        return float(np.sum(self.weight * self.residual**2))

    def gradient_norm(self) -> float:
        wr = self.weight * self.residual
        g = np.concatenate([np.einsum("pm,pmk->k", wr, self.J_i),
                            np.einsum("pm,pmk->k", wr, self.J_j),
                            np.einsum("pm,pm->p", wr, self.J_d)])
        return float(np.linalg.norm(g))


def _check_state(d_i, grid: PixelGrid):
    d_i = np.asarray(d_i, dtype=float)
    if d_i.shape != grid.shape:
        raise DimensionError(f"depth grid {d_i.shape} does not match lattice {grid.shape}")
    return d_i


def reprojection_term(T_i: Pose, T_j: Pose, d_i, corr: CorrespondenceField, w_r,
                      grid: PixelGrid, K: CameraIntrinsics) -> TermEval:
    """Residual ``x*_ij - proj(T_i, T_j, d_i, x_i)`` weighted per axis by ``w_r``."""
    d_i = _check_state(d_i, grid)
    if corr.target.shape[:2] != grid.shape:
        raise DimensionError(f"correspondence {corr.target.shape[:2]} does not match {grid.shape}")
    w_r = np.broadcast_to(np.asarray(w_r, dtype=float), grid.shape + (2,))
    # the target is given, so leaving the image does not invalidate the residual
    uv, valid, J_i, J_j, J_d = project_jacobians(T_i, T_j, d_i, grid.coords, K, in_image=False)
    valid = valid & corr.valid
    P = grid.size
    m = valid.reshape(P)
    keep = m[:, None]
    r = np.where(keep, (corr.target - uv).reshape(P, 2), 0.0)
    w = np.where(keep, w_r.reshape(P, 2), 0.0)
    Ji = np.where(keep[..., None], -J_i.reshape(P, 2, 6), 0.0)
    Jj = np.where(keep[..., None], -J_j.reshape(P, 2, 6), 0.0)
    Jd = np.where(keep, -J_d.reshape(P, 2), 0.0)
    return TermEval(r, w, Ji, Jj, Jd, m)


def featuremetric_term(T_i: Pose, T_j: Pose, d_i, F_i: FeatureMap, F_j: FeatureMap, w_f,
                       grid: PixelGrid, K: CameraIntrinsics) -> TermEval:
    """Residual ``F_i(x_i) - F_j(proj(...))``; one scalar weight per pixel shared by channels."""
    d_i = _check_state(d_i, grid)
    if F_i.channels != F_j.channels:
        raise DimensionError(f"feature channels differ: {F_i.channels} vs {F_j.channels}")
    if F_j.shape != (K.height, K.width):
        raise DimensionError(f"feature map {F_j.shape} does not match the image size")
    C = F_i.channels
    w_f = np.broadcast_to(np.asarray(w_f, dtype=float), grid.shape)
    uv, valid, J_i, J_j, J_d = project_jacobians(T_i, T_j, d_i, grid.coords, K)
    P = grid.size
    m = valid.reshape(P)
    ref = F_i.sample(grid.coords).reshape(P, C)
    val, grad = F_j.sample_with_gradient(uv.reshape(P, 2))
    keep = m[:, None]
    r = np.where(keep, ref - val, 0.0)
    w = np.where(keep, np.repeat(w_f.reshape(P, 1), C, axis=1), 0.0)
    Ji = np.where(keep[..., None], -grad @ J_i.reshape(P, 2, 6), 0.0)
    Jj = np.where(keep[..., None], -grad @ J_j.reshape(P, 2, 6), 0.0)
    Jd = np.where(keep, -np.einsum("pcx,px->pc", grad, J_d.reshape(P, 2)), 0.0)
    return TermEval(r, w, Ji, Jj, Jd, m)


# ---------------------------------------------------------------------------
# confidence providers

CONFIDENCE_CAP = 1.0


@dataclass
class ConfidenceMaps:
    w_r: np.ndarray      # (rows, cols, 2)
    w_f: np.ndarray      # (rows, cols)
    w_u: float

    def check(self, cap: float = CONFIDENCE_CAP) -> None:
        for name, w in (("w_r", self.w_r), ("w_f", self.w_f), ("w_u", np.asarray(self.w_u))):
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError(f"{name} must be finite and non-negative")
        if np.any(self.w_r > cap + 1e-12) or np.any(self.w_f > cap + 1e-12):
            raise ValueError("visual confidence above cap")


@dataclass
class ResidualSnapshot:
    """What a provider may look at: current residual fields of one edge."""

    shape: tuple[int, int]
    reproj: np.ndarray | None = None     # (rows, cols, 2)
    feat: np.ndarray | None = None       # (rows, cols, C)
    inertial: np.ndarray | None = None   # (15,)


class ConfidenceProvider:
    name = "provider"
    # first iteration from which the weights no longer change on their own
    settles_at = 0

    def __call__(self, iteration: int, edge, snapshot: ResidualSnapshot) -> ConfidenceMaps:
        raise NotImplementedError


@dataclass
class Uniform(ConfidenceProvider):
    w_r: float = 1.0
    w_f: float = 1.0
    w_u: float = 1.0
    name = "uniform"

    def __call__(self, iteration, edge, snapshot):
        return ConfidenceMaps(np.full(snapshot.shape + (2,), self.w_r),
                              np.full(snapshot.shape, self.w_f), self.w_u)


@dataclass
class Oracle(ConfidenceProvider):
    """Zero re-projection confidence exactly on known outliers."""

    inlier_masks: dict = field(default_factory=dict)
    w_f: float = 1.0
    w_u: float = 1.0
    name = "oracle"

    def __call__(self, iteration, edge, snapshot):
        mask = self.inlier_masks.get(edge)
        if mask is None:
            mask = np.ones(snapshot.shape, dtype=bool)
        w_r = np.repeat(mask.astype(float)[..., None], 2, axis=-1)
        return ConfidenceMaps(w_r, np.full(snapshot.shape, self.w_f), self.w_u)


def ramp(iteration: int, start: float, end: float, delay: int, length: int) -> float:
    """Piecewise-linear ramp: ``start`` until ``delay``, ``end`` after ``delay + length``."""
    if iteration <= delay:
        return start
    if length <= 0 or iteration >= delay + length:
        return end
    return start + (end - start) * (iteration - delay) / length


@dataclass
class Scheduled(ConfidenceProvider):
    """Iteration-indexed confidence schedule.

    Feature-metric confidence starts at zero and rises to ``ratio`` times the
    re-projection confidence; the inertial scalar ramps from ``w_u_start`` to
    ``w_u_end``.  Explicit per-iteration tables override the ramps.
    """

    w_r: float = 0.8
    ratio: float = 1.1
    delay: int = 2
    length: int = 6
    w_u_start: float = 1.0
    w_u_end: float = 1.0
    w_f_table: tuple | None = None
    name = "scheduled"

    def __post_init__(self):
        if self.ratio * self.w_r > CONFIDENCE_CAP + 1e-12:
            raise ValueError("final feature-metric confidence exceeds the cap")

    @property
    def settles_at(self) -> int:
        if self.w_f_table is not None:
            return max(len(self.w_f_table) - 1, self.delay + self.length)
        return self.delay + self.length

    def weights(self, iteration: int) -> tuple[float, float, float]:
        if self.w_f_table is not None:
            w_f = self.w_f_table[min(iteration, len(self.w_f_table) - 1)]
        else:
            w_f = ramp(iteration, 0.0, self.ratio * self.w_r, self.delay, self.length)
        w_u = ramp(iteration, self.w_u_start, self.w_u_end, self.delay, self.length)
        return self.w_r, w_f, w_u

    def __call__(self, iteration, edge, snapshot):
        w_r, w_f, w_u = self.weights(iteration)
        return ConfidenceMaps(np.full(snapshot.shape + (2,), w_r),
                              np.full(snapshot.shape, w_f), w_u)


def huber_weight(r: np.ndarray, k: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= k, 1.0, k / np.maximum(a, 1e-300))


@dataclass
class ResidualAdaptive(ConfidenceProvider):
    """Huber-style down-weighting of large residuals seen at the previous evaluation."""

    k_r: float = 2.0      # pixels
    k_f: float = 1.0      # feature units (per-channel RMS)
    w_u: float = 1.0
    name = "residual_adaptive"

    def __call__(self, iteration, edge, snapshot):
        w_r = np.ones(snapshot.shape + (2,))
        w_f = np.ones(snapshot.shape)
        if snapshot.reproj is not None:
            w_r = huber_weight(snapshot.reproj, self.k_r)
        if snapshot.feat is not None:
            rms = np.sqrt(np.mean(snapshot.feat**2, axis=-1))
            w_f = huber_weight(rms, self.k_f)
        return ConfidenceMaps(w_r, w_f, self.w_u)


@dataclass
class Combined(ConfidenceProvider):
    """Take each confidence class from its own provider."""

    reproj: ConfidenceProvider
    feat: ConfidenceProvider
    imu: ConfidenceProvider
    name = "combined"

    @property
    def settles_at(self) -> int:
        return max(p.settles_at for p in (self.reproj, self.feat, self.imu))

    def __call__(self, iteration, edge, snapshot):
        a = self.reproj(iteration, edge, snapshot)
        b = a if self.feat is self.reproj else self.feat(iteration, edge, snapshot)
        c = a if self.imu is self.reproj else self.imu(iteration, edge, snapshot)
        return ConfidenceMaps(a.w_r, b.w_f, c.w_u)


def provide_confidence(provider: ConfidenceProvider, iteration: int, edge=None,
                       snapshot: ResidualSnapshot | None = None,
                       shape: tuple[int, int] = (8, 8)) -> ConfidenceMaps:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if snapshot is None:
        snapshot = ResidualSnapshot(shape)
    maps = provider(iteration, edge, snapshot)
    maps.check()
    return maps

