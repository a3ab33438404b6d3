"""IMU pre-integration, the inertial residual and forward propagation.

Keyframe poses in the optimizer are camera poses; the inertial terms work on
body (IMU) poses obtained through the calibrated extrinsic.  Velocity and
biases belong to the body.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (Pose, adjoint, hat, so3_exp, so3_log, so3_right_jacobian,
                       so3_right_jacobian_inv)

GRAVITY = np.array([0.0, 0.0, -9.81])


class ImuSegmentError(ValueError):
    """Raised for empty, non-monotonic or otherwise unusable IMU segments."""


@dataclass(frozen=True)
class ImuSamples:
    """A stream of IMU samples stored column-wise.

    ``t`` in seconds, ``gyro`` in rad/s, ``accel`` (specific force) in m/s^2.
    ``t_ns`` keeps the original integer nanosecond stamps when the stream was
    read from disk.
    """

    t: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    t_ns: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(-1))
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(-1, 3))

    def __len__(self):
        return len(self.t)

    def slice(self, t0: float, t1: float) -> "ImuSamples":
        """Samples covering ``[t0, t1]``, linearly interpolated at both ends."""
        if t1 <= t0:
            raise ImuSegmentError(f"empty interval [{t0}, {t1}]")
        if len(self.t) < 2 or t0 < self.t[0] - 1e-9 or t1 > self.t[-1] + 1e-9:
            raise ImuSegmentError(f"interval [{t0}, {t1}] not covered by the stream")
        inner = (self.t > t0 + 1e-12) & (self.t < t1 - 1e-12)
        t = np.concatenate([[t0], self.t[inner], [t1]])
        gyro = np.stack([np.interp(t, self.t, self.gyro[:, k]) for k in range(3)], axis=1)
        accel = np.stack([np.interp(t, self.t, self.accel[:, k]) for k in range(3)], axis=1)
        return ImuSamples(t, gyro, accel)

    @staticmethod
    def concatenate(parts: list["ImuSamples"]) -> "ImuSamples":
        """Join consecutive segments that share their boundary sample."""
        t = [parts[0].t]
        g = [parts[0].gyro]
        a = [parts[0].accel]
        for p in parts[1:]:
            t.append(p.t[1:])
            g.append(p.gyro[1:])
            a.append(p.accel[1:])
        return ImuSamples(np.concatenate(t), np.concatenate(g), np.concatenate(a))


@dataclass(frozen=True)
class ImuCalib:
    gyro_noise: float = 1.7e-4        # rad/s/sqrt(Hz)
    accel_noise: float = 2.0e-3       # m/s^2/sqrt(Hz)
    gyro_walk: float = 1.9e-5         # rad/s^2/sqrt(Hz)
    accel_walk: float = 3.0e-3        # m/s^3/sqrt(Hz)
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    T_body_cam: Pose = field(default_factory=Pose.identity)
    allow_any_gravity: bool = False

    def __post_init__(self):
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))
        for name in ("gyro_noise", "accel_noise", "gyro_walk", "accel_walk"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        g = np.linalg.norm(self.gravity)
        if not self.allow_any_gravity and not 9.0 <= g <= 10.5:
            raise ValueError(f"gravity magnitude {g:.3f} outside [9.0, 10.5]")

    def with_gravity(self, g) -> "ImuCalib":
        return ImuCalib(self.gyro_noise, self.accel_noise, self.gyro_walk, self.accel_walk,
                        np.asarray(g, dtype=float), self.T_body_cam, self.allow_any_gravity)

    def body_pose(self, T_wc: Pose) -> Pose:
        return T_wc @ self.T_body_cam.inverse()

    def camera_pose(self, T_wb: Pose) -> Pose:
        return T_wb @ self.T_body_cam


@dataclass(frozen=True)
class MotionState:
    """Body velocity (world frame), accelerometer bias and gyroscope bias."""

    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("v", "ba", "bg"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.ba, self.bg])

    @classmethod
    def from_vector(cls, x) -> "MotionState":
        x = np.asarray(x, dtype=float)
        return cls(x[:3], x[3:6], x[6:9])

    def check(self, bias_bound: float = 1.0) -> None:
        x = self.vector()
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite motion state")
        if np.abs(self.ba).max() > bias_bound or np.abs(self.bg).max() > bias_bound:
            raise ValueError("bias magnitude above sanity bound")


@dataclass(frozen=True)
class Preintegrated:
    """Relative motion accumulated between two keyframes.

    ``cov`` is ordered (rotation, velocity, position).  The bias Jacobians are
    the exact derivatives of the discrete integration scheme at ``ba_lin``,
    ``bg_lin``.
    """

    dR: np.ndarray
    dv: np.ndarray
    dp: np.ndarray
    ba_lin: np.ndarray
    bg_lin: np.ndarray
    J_R_bg: np.ndarray
    J_v_ba: np.ndarray
    J_v_bg: np.ndarray
    J_p_ba: np.ndarray
    J_p_bg: np.ndarray
    cov: np.ndarray
    dt: float
    samples: ImuSamples | None = None


def preintegrate(samples: ImuSamples, ba_lin, bg_lin, calib: ImuCalib,
                 segment: str = "") -> Preintegrated:
    """Midpoint integration of bias-corrected measurements.

    Each step uses the average of the two bracketing gyro readings for the
    rotation increment and the average of both rotated specific forces for
    velocity and position.
    """
    t = samples.t
    if len(t) < 2:
        raise ImuSegmentError(f"segment {segment!r}: need at least two samples")
    steps = np.diff(t)
    if not np.all(steps > 0):
        raise ImuSegmentError(f"segment {segment!r}: timestamps not strictly increasing")
    ba = np.asarray(ba_lin, dtype=float)
    bg = np.asarray(bg_lin, dtype=float)

    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    J_R = np.zeros((3, 3))
    J_va = np.zeros((3, 3))
    J_vg = np.zeros((3, 3))
    J_pa = np.zeros((3, 3))
    J_pg = np.zeros((3, 3))
    cov = np.zeros((9, 9))
    I3 = np.eye(3)
    q_g = calib.gyro_noise**2
    q_a = calib.accel_noise**2

    for k, h in enumerate(steps):
        w_mid = 0.5 * (samples.gyro[k] + samples.gyro[k + 1]) - bg
        phi = w_mid * h
        E = so3_exp(phi)
        Jr = so3_right_jacobian(phi)
        dR_next = dR @ E
        J_R_next = E.T @ J_R - Jr * h

        a0 = samples.accel[k] - ba
        a1 = samples.accel[k + 1] - ba
        acc = 0.5 * (dR @ a0 + dR_next @ a1)
        dacc_dba = -0.5 * (dR + dR_next)
        dacc_dbg = -0.5 * (dR @ hat(a0) @ J_R + dR_next @ hat(a1) @ J_R_next)
        dacc_dth = -0.5 * (dR @ hat(a0) + dR_next @ hat(a1) @ E.T)

        A = np.eye(9)
        A[0:3, 0:3] = E.T
        A[3:6, 0:3] = dacc_dth * h
        A[6:9, 0:3] = 0.5 * dacc_dth * h * h
        A[6:9, 3:6] = I3 * h
        B = np.zeros((9, 6))
        B[0:3, 0:3] = -Jr * h
        dacc_dng = 0.5 * dR_next @ hat(a1) @ Jr * h
        B[3:6, 0:3] = dacc_dng * h
        B[6:9, 0:3] = 0.5 * dacc_dng * h * h
        B[3:6, 3:6] = 0.5 * (dR + dR_next) * h
        B[6:9, 3:6] = 0.25 * (dR + dR_next) * h * h
        Q = np.diag([q_g / h] * 3 + [q_a / h] * 3)
        cov = A @ cov @ A.T + B @ Q @ B.T
        cov = 0.5 * (cov + cov.T)

        dp = dp + dv * h + 0.5 * acc * h * h
        dv = dv + acc * h
        J_pa = J_pa + J_va * h + 0.5 * dacc_dba * h * h
        J_pg = J_pg + J_vg * h + 0.5 * dacc_dbg * h * h
        J_va = J_va + dacc_dba * h
        J_vg = J_vg + dacc_dbg * h
        dR = dR_next
        J_R = J_R_next

    return Preintegrated(dR, dv, dp, ba.copy(), bg.copy(), J_R, J_va, J_vg, J_pa, J_pg,
                         cov, float(t[-1] - t[0]), samples)


def repreintegrate(pre: Preintegrated, ba, bg, calib: ImuCalib) -> Preintegrated:
    if pre.samples is None:
        raise ImuSegmentError("raw samples not retained; cannot re-preintegrate")
    return preintegrate(pre.samples, ba, bg, calib)


def merge(first: Preintegrated, second: Preintegrated, calib: ImuCalib) -> Preintegrated:
    """Re-preintegrate two adjacent segments as one (keyframe removal)."""
    if first.samples is None or second.samples is None:
        raise ImuSegmentError("raw samples not retained; cannot merge segments")
    joined = ImuSamples.concatenate([first.samples, second.samples])
    return preintegrate(joined, first.ba_lin, first.bg_lin, calib)


def corrected_deltas(pre: Preintegrated, ba, bg):
    """First-order bias update of the stored deltas."""
    dba = np.asarray(ba, dtype=float) - pre.ba_lin
    dbg = np.asarray(bg, dtype=float) - pre.bg_lin
    dR = pre.dR @ so3_exp(pre.J_R_bg @ dbg)
    dv = pre.dv + pre.J_v_ba @ dba + pre.J_v_bg @ dbg
    dp = pre.dp + pre.J_p_ba @ dba + pre.J_p_bg @ dbg
    return dR, dv, dp


PREINT_REG = 1e-12
# residual order (rotation, position, velocity) from covariance order
# (rotation, velocity, position)
_RES_FROM_COV = np.r_[0:3, 6:9, 3:6]


def preintegration_weight(pre: Preintegrated, segment: str = "") -> np.ndarray:
    """Information matrix of the deltas, ``(cov + reg I)^-1``, in covariance order."""
    if not np.all(np.isfinite(pre.cov)):
        raise ImuSegmentError(f"segment {segment!r}: non-finite covariance")
    W = np.linalg.inv(pre.cov + PREINT_REG * np.eye(9))
    return 0.5 * (W + W.T)


def inertial_information(pre: Preintegrated, calib: ImuCalib, w_u: float = 1.0) -> np.ndarray:
    """15x15 information in residual order (rot, pos, vel, ba, bg)."""
    W = np.zeros((15, 15))
    Wpu = preintegration_weight(pre)
    W[:9, :9] = Wpu[np.ix_(_RES_FROM_COV, _RES_FROM_COV)]
    var_a = calib.accel_walk**2 * pre.dt + PREINT_REG
    var_g = calib.gyro_walk**2 * pre.dt + PREINT_REG
    W[9:12, 9:12] = np.eye(3) / var_a
    W[12:15, 12:15] = np.eye(3) / var_g
    return w_u * W


def _body_residual(Rb_i, pb_i, M_i: MotionState, Rb_j, pb_j, M_j: MotionState,
                   pre: Preintegrated, g):
    dt = pre.dt
    dR, dv, dp = corrected_deltas(pre, M_i.ba, M_i.bg)
    E = dR.T @ Rb_i.T @ Rb_j
    e_R = so3_log(E)
    a_p = Rb_i.T @ (pb_j - pb_i - M_i.v * dt - 0.5 * g * dt * dt)
    a_v = Rb_i.T @ (M_j.v - M_i.v - g * dt)
    r = np.concatenate([e_R, a_p - dp, a_v - dv, M_j.ba - M_i.ba, M_j.bg - M_i.bg])
    return r, E, a_p, a_v


def inertial_residual(T_i: Pose, M_i: MotionState, T_j: Pose, M_j: MotionState,
                      pre: Preintegrated, calib: ImuCalib, w_u: float = 1.0,
                      with_jacobians: bool = True):
    """Inertial residual between camera poses ``T_i``, ``T_j``.

    Returns ``(r, J, W)``: the 15-vector ordered (rotation, position,
    velocity, accel-bias difference, gyro-bias difference), its 15x30
    Jacobian with columns (T_i 6, M_i 9, T_j 6, M_j 9), and the 15x15
    information matrix scaled by ``w_u``.
    """
    if not pre.dt > 0:
        raise ImuSegmentError("non-positive integration interval")
    Tb_i = calib.body_pose(T_i)
    Tb_j = calib.body_pose(T_j)
    g = calib.gravity
    r, E, a_p, a_v = _body_residual(Tb_i.R, Tb_i.t, M_i, Tb_j.R, Tb_j.t, M_j, pre, g)
    W = inertial_information(pre, calib, w_u)
    if not with_jacobians:
        return r, None, W

    dt = pre.dt
    Rb_i, Rb_j = Tb_i.R, Tb_j.R
    Jr_inv = so3_right_jacobian_inv(r[:3])
    dbg = M_i.bg - pre.bg_lin
    # body-frame Jacobians, pose columns ordered (rho, phi)
    Jb = np.zeros((15, 30))
    Jb[0:3, 3:6] = -Jr_inv @ Rb_j.T @ Rb_i
    Jb[0:3, 18:21] = Jr_inv
    Jb[0:3, 12:15] = -Jr_inv @ E.T @ so3_right_jacobian(pre.J_R_bg @ dbg) @ pre.J_R_bg

    Jb[3:6, 0:3] = -np.eye(3)
    Jb[3:6, 3:6] = hat(a_p)
    Jb[3:6, 6:9] = -Rb_i.T * dt
    Jb[3:6, 9:12] = -pre.J_p_ba
    Jb[3:6, 12:15] = -pre.J_p_bg
    Jb[3:6, 15:18] = Rb_i.T @ Rb_j

    Jb[6:9, 3:6] = hat(a_v)
    Jb[6:9, 6:9] = -Rb_i.T
    Jb[6:9, 9:12] = -pre.J_v_ba
    Jb[6:9, 12:15] = -pre.J_v_bg
    Jb[6:9, 21:24] = Rb_i.T

    Jb[9:12, 9:12] = -np.eye(3)
    Jb[9:12, 24:27] = np.eye(3)
    Jb[12:15, 12:15] = -np.eye(3)
    Jb[12:15, 27:30] = np.eye(3)

    # camera perturbation xi_c maps to body perturbation Ad(T_bc) xi_c
    Ad = adjoint(calib.T_body_cam)
    J = Jb.copy()
    J[:, 0:6] = Jb[:, 0:6] @ Ad
    J[:, 15:21] = Jb[:, 15:21] @ Ad
    return r, J, W


def propagate(T_i: Pose, M_i: MotionState, pre: Preintegrated, calib: ImuCalib):
    """Predict the camera pose and body velocity at the end of the segment."""
    if not pre.dt > 0:
        raise ImuSegmentError("non-positive integration interval")
    Tb = calib.body_pose(T_i)
    dt = pre.dt
    g = calib.gravity
    dR, dv, dp = corrected_deltas(pre, M_i.ba, M_i.bg)
    R_j = Tb.R @ dR
    v_j = M_i.v + g * dt + Tb.R @ dv
    p_j = Tb.t + M_i.v * dt + 0.5 * g * dt * dt + Tb.R @ dp
    return calib.camera_pose(Pose(R_j, p_j)), v_j
