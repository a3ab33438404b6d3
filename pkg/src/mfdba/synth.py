"""Synthetic worlds with analytic ground truth.

The scene is a gently bumped wall ``y = wall_distance + h(x, z)`` carrying a
band-limited feature field.  Cameras move on analytic C2 body trajectories
with the optical axis roughly along world +y, so every lattice pixel sees the
wall.  World frame is z-up with gravity along -z.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicSpline

from .factors import CorrespondenceField, FeatureMap
from .geometry import CameraIntrinsics, PixelGrid, Pose, project, so3_exp
from .imu import GRAVITY, ImuCalib, ImuSamples

# camera x right = world x, camera y down = world -z, optical axis = world +y
R_WORLD_CAM_FORWARD = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])


class TrajectoryError(ValueError):
    pass


class VisibilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "circle"                  # circle | lissajous | spline | static
    duration: float = 2.0
    frame_rate: float = 10.0
    imu_rate: float = 200.0
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    omega: float = 2.0                    # rad/s along the circle
    phase: float = 0.0
    amplitudes: tuple = (0.6, 0.2, 0.4)   # lissajous
    frequencies: tuple = (1.1, 0.7, 1.6)
    waypoints: tuple = ()                 # spline: ((t, x, y, z), ...)
    wobble_amplitude: tuple = (0.08, 0.08, 0.05)   # rad, body x/y/z
    wobble_frequency: tuple = (1.3, 1.7, 0.9)      # rad/s
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("circle", "lissajous", "spline", "static"):
            raise TrajectoryError(f"unknown trajectory kind {self.kind!r}")
        if self.duration <= 0 or self.frame_rate <= 0:
            raise TrajectoryError("duration and frame rate must be positive")
        if self.imu_rate < 10 * self.frame_rate:
            raise TrajectoryError("IMU rate must be at least 10x the frame rate")


@dataclass(frozen=True)
class KinematicState:
    pose: Pose            # body -> world
    velocity: np.ndarray  # world frame
    accel: np.ndarray     # world frame
    omega: np.ndarray     # body frame


class Trajectory:
    """Analytic body trajectory: position, orientation and derivatives at any time."""

    def __init__(self, spec: TrajectorySpec, base_rotation: np.ndarray | None = None):
        self.spec = spec
        self.base = np.eye(3) if base_rotation is None else np.asarray(base_rotation, float)
        rng = np.random.default_rng(spec.seed)
        self._wobble_phase = rng.uniform(0, 2 * np.pi, 3)
        self._lissajous_phase = rng.uniform(0, 2 * np.pi, 3)
        self._spline = None
        if spec.kind == "spline":
            wp = np.asarray(spec.waypoints, dtype=float)
            if wp.ndim != 2 or wp.shape[0] < 2 or wp.shape[1] != 4:
                raise TrajectoryError("spline needs at least two (t, x, y, z) waypoints")
            if not np.all(np.diff(wp[:, 0]) > 0):
                raise TrajectoryError("spline waypoint times must increase")
            if wp[0, 0] > 0 or wp[-1, 0] < spec.duration:
                raise TrajectoryError("spline waypoints must span the duration")
            self._spline = CubicSpline(wp[:, 0], wp[:, 1:], bc_type="natural")

    def _position(self, t: float):
        s = self.spec
        c = np.asarray(s.center, dtype=float)
        if s.kind == "circle":
            a = s.omega * t + s.phase
            r, w = s.radius, s.omega
            p = c + r * np.array([np.cos(a), 0.0, np.sin(a)])
            v = r * w * np.array([-np.sin(a), 0.0, np.cos(a)])
            acc = -r * w * w * np.array([np.cos(a), 0.0, np.sin(a)])
            return p, v, acc
        if s.kind == "lissajous":
            A = np.asarray(s.amplitudes, float)
            f = np.asarray(s.frequencies, float)
            ang = f * t + self._lissajous_phase
            # subtract the t=0 offset so the trajectory starts at the centre
            p = c + A * (np.sin(ang) - np.sin(self._lissajous_phase))
            return p, A * f * np.cos(ang), -A * f * f * np.sin(ang)
        if s.kind == "spline":
            sp = self._spline
            return sp(t), sp(t, 1), sp(t, 2)
        return c.copy(), np.zeros(3), np.zeros(3)

    def _rotation(self, t: float):
        s = self.spec
        if s.kind == "static":
            return self.base.copy(), np.zeros(3)
        A = np.asarray(s.wobble_amplitude, float)
        w = np.asarray(s.wobble_frequency, float)
        th = A * np.sin(w * t + self._wobble_phase)
        dth = A * w * np.cos(w * t + self._wobble_phase)
        e = np.eye(3)
        R1, R2, R3 = (so3_exp(th[k] * e[k]) for k in range(3))
        R = self.base @ R1 @ R2 @ R3
        omega = R3.T @ R2.T @ (dth[0] * e[0]) + R3.T @ (dth[1] * e[1]) + dth[2] * e[2]
        return R, omega

    def state(self, t: float) -> KinematicState:
        p, v, a = self._position(t)
        R, w = self._rotation(t)
        return KinematicState(Pose(R, p), np.asarray(v, float), np.asarray(a, float), w)

    @property
    def frame_times(self) -> np.ndarray:
        n = int(np.floor(self.spec.duration * self.spec.frame_rate + 1e-9)) + 1
        return np.arange(n) / self.spec.frame_rate

    @property
    def imu_times(self) -> np.ndarray:
        n = int(np.floor(self.spec.duration * self.spec.imu_rate + 1e-9)) + 1
        return np.arange(n) / self.spec.imu_rate


@dataclass
class TrajectorySamples:
    t: np.ndarray
    poses: list[Pose]
    velocity: np.ndarray
    accel: np.ndarray
    omega: np.ndarray


def gen_trajectory(spec: TrajectorySpec, base_rotation=None,
                   times: np.ndarray | None = None) -> TrajectorySamples:
    """Sample an analytic trajectory (default: at frame times)."""
    traj = Trajectory(spec, base_rotation)
    t = traj.frame_times if times is None else np.asarray(times, float)
    states = [traj.state(float(ti)) for ti in t]
    return TrajectorySamples(t, [s.pose for s in states],
                             np.array([s.velocity for s in states]),
                             np.array([s.accel for s in states]),
                             np.array([s.omega for s in states]))


@dataclass(frozen=True)
class NoiseSpec:
    gyro_noise: float = 0.0      # rad/s/sqrt(Hz)
    accel_noise: float = 0.0     # m/s^2/sqrt(Hz)
    gyro_walk: float = 0.0       # rad/s^2/sqrt(Hz)
    accel_walk: float = 0.0      # m/s^3/sqrt(Hz)
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    accel_bias: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("gyro_noise", "accel_noise", "gyro_walk", "accel_walk"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class ImuData:
    samples: ImuSamples
    gyro_bias: np.ndarray      # (N, 3) true bias at each sample
    accel_bias: np.ndarray


def gen_imu(traj: Trajectory, gravity=GRAVITY, noise: NoiseSpec = NoiseSpec(),
            times: np.ndarray | None = None) -> ImuData:
    """Specific force and body rate with white noise and random-walk biases."""
    t = traj.imu_times if times is None else np.asarray(times, float)
    n = len(t)
    g = np.asarray(gravity, float)
    rng = np.random.default_rng(noise.seed)
    dt = np.diff(t).mean() if n > 1 else 1.0
    bg = np.empty((n, 3))
    ba = np.empty((n, 3))
    bg[0] = noise.gyro_bias
    ba[0] = noise.accel_bias
    walk_g = rng.normal(size=(n, 3)) * noise.gyro_walk * np.sqrt(dt)
    walk_a = rng.normal(size=(n, 3)) * noise.accel_walk * np.sqrt(dt)
    for k in range(1, n):
        bg[k] = bg[k - 1] + walk_g[k]
        ba[k] = ba[k - 1] + walk_a[k]
    white_g = rng.normal(size=(n, 3)) * noise.gyro_noise / np.sqrt(dt)
    white_a = rng.normal(size=(n, 3)) * noise.accel_noise / np.sqrt(dt)
    gyro = np.empty((n, 3))
    accel = np.empty((n, 3))
    for k, tk in enumerate(t):
        s = traj.state(float(tk))
        gyro[k] = s.omega + bg[k] + white_g[k]
        accel[k] = s.pose.R.T @ (s.accel - g) + ba[k] + white_a[k]
    return ImuData(ImuSamples(t, gyro, accel), bg, ba)


@dataclass(frozen=True)
class SceneSpec:
    wall_distance: float = 3.0         # m, along world +y
    bump_amplitude: float = 0.25       # m
    bump_wavelength: tuple = (1.5, 4.0)
    channels: int = 8
    n_sinusoids: int = 50
    feature_wavelength: tuple = (0.8, 2.5)   # m on the wall
    feature_amplitude: float = 1.0
    feature_noise: float = 0.0
    outlier_fraction: float = 0.0
    pixel_noise: float = 0.0           # full-resolution pixels
    depth_noise: float = 0.0           # relative, for measured (stereo/rgbd) depth
    seed: int = 0

    def __post_init__(self):
        if self.wall_distance <= 0:
            raise ValueError("depth range must be positive")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier fraction must lie in [0, 1)")


class Wall:
    """Height field ``y = Y0 + h(x, z)`` with an attached feature field."""

    def __init__(self, spec: SceneSpec, seed: int):
        rng = np.random.default_rng(seed)
        self.y0 = spec.wall_distance
        nb = 6
        lam = rng.uniform(*spec.bump_wavelength, nb)
        ang = rng.uniform(0, np.pi, nb)
        self.bump_k = (2 * np.pi / lam)[:, None] * np.stack([np.cos(ang), np.sin(ang)], 1)
        self.bump_a = spec.bump_amplitude / np.sqrt(nb) * rng.uniform(0.5, 1.0, nb)
        self.bump_phase = rng.uniform(0, 2 * np.pi, nb)

        C, M = spec.channels, spec.n_sinusoids
        lam = rng.uniform(*spec.feature_wavelength, M)
        ang = rng.uniform(0, np.pi, M)
        self.feat_k = (2 * np.pi / lam)[:, None] * np.stack([np.cos(ang), np.sin(ang)], 1)
        self.feat_a = rng.normal(size=(C, M)) * spec.feature_amplitude * np.sqrt(2.0 / M)
        self.feat_phase = rng.uniform(0, 2 * np.pi, (C, M))

    def height(self, xz):
        arg = xz @ self.bump_k.T + self.bump_phase
        h = np.sin(arg) @ self.bump_a
        grad = (np.cos(arg) * self.bump_a) @ self.bump_k
        return h, grad

    def features(self, xz):
        """Feature vectors (..., C) at wall coordinates (..., 2)."""
        arg = xz @ self.feat_k.T                      # (..., M)
        return np.einsum("cm,...cm->...c", self.feat_a,
                         np.sin(arg[..., None, :] + self.feat_phase))

    def feature_hessian_bound(self) -> float:
        """Upper bound on |second derivative| of any channel along any wall direction."""
        k2 = np.sum(self.feat_k**2, axis=1)
        return float(np.max(np.abs(self.feat_a) @ k2))

    def raycast(self, origin, dirs, iters: int = 30):
        """Ray parameter of the first wall hit; nan where the ray misses."""
        dy = dirs[..., 1]
        lam = (self.y0 - origin[1]) / np.where(dy > 1e-9, dy, np.nan)
        for _ in range(iters):
            pts = origin + lam[..., None] * dirs
            h, grad = self.height(pts[..., [0, 2]])
            f = pts[..., 1] - self.y0 - h
            fp = dy - grad[..., 0] * dirs[..., 0] - grad[..., 1] * dirs[..., 2]
            lam = lam - f / fp
        pts = origin + lam[..., None] * dirs
        h, _ = self.height(pts[..., [0, 2]])
        bad = ~(np.abs(pts[..., 1] - self.y0 - h) < 1e-9) | ~(lam > 0)
        return np.where(bad, np.nan, lam)


DEFAULT_EXTRINSIC = Pose(so3_exp([0.02, -0.03, 0.01]), [0.04, -0.02, 0.03])


def default_camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=48.0, fy=48.0, cx=31.5, cy=31.5, width=64, height=64)


@dataclass
class SyntheticWorld:
    """Ground truth for every frame of one sequence plus on-demand views."""

    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    scene: SceneSpec = field(default_factory=SceneSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    K: CameraIntrinsics = field(default_factory=default_camera)
    stride: int = 8
    T_body_cam: Pose = DEFAULT_EXTRINSIC
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    retries: int = 5

    def __post_init__(self):
        self.grid = PixelGrid.for_camera(self.K, self.stride)
        base = R_WORLD_CAM_FORWARD @ self.T_body_cam.R.T
        self.traj = Trajectory(self.trajectory, base)
        self.times = self.traj.frame_times
        states = [self.traj.state(float(t)) for t in self.times]
        self.body_poses = [s.pose for s in states]
        self.velocities = np.array([s.velocity for s in states])
        self.cam_poses = [T @ self.T_body_cam for T in self.body_poses]
        self._feature_cache: dict[int, FeatureMap] = {}
        for attempt in range(self.retries):
            self.wall = Wall(self.scene, self.scene.seed + 7919 * attempt)
            bad = [k for k in range(len(self.times)) if not self._visible(k)]
            if not bad:
                break
        else:
            raise VisibilityError(f"frame {bad[0]} does not see the scene after "
                                  f"{self.retries} attempts")

    @property
    def n_frames(self) -> int:
        return len(self.times)

    def calib(self, **noise) -> ImuCalib:
        return ImuCalib(T_body_cam=self.T_body_cam, gravity=self.gravity, **noise)

    def _rays(self, k: int, x: np.ndarray):
        T = self.cam_poses[k]
        return T.t, self.K.normalized(x) @ T.R.T

    def _visible(self, k: int) -> bool:
        o, d = self._rays(k, self.grid.coords)
        return bool(np.all(np.isfinite(self.wall.raycast(o, d))))

    def inverse_depth(self, k: int) -> np.ndarray:
        o, d = self._rays(k, self.grid.coords)
        lam = self.wall.raycast(o, d)
        if not np.all(np.isfinite(lam)):
            raise VisibilityError(f"frame {k}: ray cast failed")
        return 1.0 / lam

    @cached_property
    def depths(self) -> np.ndarray:
        return np.stack([self.inverse_depth(k) for k in range(self.n_frames)])

    def surface_points(self, k: int, x: np.ndarray) -> np.ndarray:
        o, d = self._rays(k, x)
        lam = self.wall.raycast(o, d)
        return o + lam[..., None] * d

    def feature_map(self, k: int) -> FeatureMap:
        if k not in self._feature_cache:
            h, w = self.K.height, self.K.width
            uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
            X = self.surface_points(k, np.stack([uu, vv], -1))
            if not np.all(np.isfinite(X)):
                raise VisibilityError(f"frame {k}: feature rendering hit no surface")
            F = self.wall.features(X[..., [0, 2]])
            if self.scene.feature_noise > 0:
                rng = np.random.default_rng([self.scene.seed, 31, k])
                F = F + rng.normal(size=F.shape) * self.scene.feature_noise
            self._feature_cache[k] = FeatureMap(F)
        return self._feature_cache[k]

    def exact_flow(self, i: int, j: int):
        return project(self.cam_poses[i], self.cam_poses[j], self.depths[i],
                       self.grid.coords, self.K)

    def correspondence(self, i: int, j: int, pixel_noise: float | None = None,
                       outlier_fraction: float | None = None):
        """Observed field i -> j and the inlier mask.

        Targets are the exact projections plus Gaussian noise; a fixed
        fraction of the valid pixels is replaced by uniform random targets.
        Deterministic in (scene seed, i, j).
        """
        sigma = self.scene.pixel_noise if pixel_noise is None else pixel_noise
        frac = self.scene.outlier_fraction if outlier_fraction is None else outlier_fraction
        uv, valid = self.exact_flow(i, j)
        rng = np.random.default_rng([self.scene.seed, 17, i, j])
        target = uv + rng.normal(size=uv.shape) * sigma
        inlier = valid.copy()
        idx = np.flatnonzero(valid)
        n_out = int(round(frac * idx.size))
        if n_out:
            chosen = rng.choice(idx, size=n_out, replace=False)
            flat = target.reshape(-1, 2)
            flat[chosen, 0] = rng.uniform(0, self.K.width - 1, n_out)
            flat[chosen, 1] = rng.uniform(0, self.K.height - 1, n_out)
            inlier.reshape(-1)[chosen] = False
        target = np.where(valid[..., None], target, 0.0)
        return CorrespondenceField(target, valid), inlier

    @cached_property
    def imu(self) -> ImuData:
        return gen_imu(self.traj, self.gravity, self.noise)

    @property
    def imu_samples(self) -> ImuSamples:
        return self.imu.samples

    @property
    def initial_pose(self) -> Pose:
        return self.cam_poses[0]

    @property
    def initial_velocity(self) -> np.ndarray:
        return self.velocities[0].copy()

    def measured_depth(self, k: int) -> np.ndarray:
        """Inverse depth as a depth sensor would report it (multiplicative noise)."""
        d = self.depths[k]
        if self.scene.depth_noise > 0:
            rng = np.random.default_rng([self.scene.seed, 53, k])
            d = d * (1.0 + self.scene.depth_noise * rng.normal(size=d.shape))
        return d


def gen_views(world: SyntheticWorld):
    """Depth grids and feature maps for every frame (correspondences are on demand)."""
    return world.depths, [world.feature_map(k) for k in range(world.n_frames)]


def rotation_flow_field(grid: PixelGrid, shift_lattice: float):
    """A uniform horizontal flow of ``shift_lattice`` lattice pixels."""
    target = grid.coords + np.array([shift_lattice * grid.stride, 0.0])
    return CorrespondenceField(target, np.ones(grid.shape, dtype=bool))


__all__ = ["TrajectorySpec", "SceneSpec", "NoiseSpec", "Trajectory", "SyntheticWorld",
           "gen_trajectory", "gen_imu", "gen_views"]
