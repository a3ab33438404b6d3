"""Lie-group primitives, pinhole camera and the dense projection operator.

Conventions used everywhere in the package:

* A :class:`Pose` maps points from its local (camera or body) frame into the
  world frame, ``X_w = R @ X + t``.
* Tangent vectors of SE(3) are ordered ``(rho, phi)``: translation first,
  rotation second.
* Perturbations are local (right): ``T <- T @ se3_exp(xi)``.  To first order
  this moves the rotation as ``R Exp(phi)`` and the translation as
  ``t + R rho``.  All analytic Jacobians in the package use this convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_SMALL_ANGLE = 1e-8


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector, batched over leading axes."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def so3_exp(omega) -> np.ndarray:
    """Rodrigues formula; second-order Taylor expansion near zero."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = hat(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    return (np.eye(3) + (np.sin(theta) / theta) * W
            + ((1.0 - np.cos(theta)) / theta**2) * W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`so3_exp` with ``|omega| <= pi``.

    At exactly ``pi`` the axis is ambiguous up to sign; the returned vector has
    its largest-magnitude component positive, e.g. a half turn about z gives
    ``(0, 0, pi)``.
    """
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    skew = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_theta = np.linalg.norm(skew)
    if cos_theta > 0.0:
        # arcsin is well conditioned here; the ratio theta/sin(theta) -> 1.
        theta = np.arcsin(min(sin_theta, 1.0))
        if theta < _SMALL_ANGLE:
            return skew * (1.0 + theta**2 / 6.0)
        return skew * (theta / sin_theta)
    theta = np.arctan2(sin_theta, cos_theta)
    if np.pi - theta > 1e-6:
        return skew * (theta / sin_theta)
    # Near pi: extract the axis from the symmetric part R + R^T = 2 cos I + 2(1 - cos) a a^T.
    B = 0.5 * (R + R.T) - cos_theta * np.eye(3)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if np.dot(axis, skew) < 0.0:
        axis = -axis
    if sin_theta < 1e-12 and axis[np.argmax(np.abs(axis))] < 0.0:
        axis = -axis
    return theta * axis


def so3_right_jacobian(omega) -> np.ndarray:
    """Right Jacobian: ``Exp(w + d) ~= Exp(w) Exp(Jr(w) d)``."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = hat(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + W @ W / 6.0
    return (np.eye(3) - ((1.0 - np.cos(theta)) / theta**2) * W
            + ((theta - np.sin(theta)) / theta**3) * W @ W)


def so3_right_jacobian_inv(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = hat(omega)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * W + W @ W / 12.0
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * W + coef * W @ W


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (SVD projection)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


def _se3_v(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    W = hat(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (np.eye(3) + ((1.0 - np.cos(theta)) / theta**2) * W
            + ((theta - np.sin(theta)) / theta**3) * W @ W)


@dataclass(frozen=True)
class Pose:
    """Rigid transform local -> world."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "Pose":
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def act(self, X: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        return X @ self.R.T + self.t

    def retract(self, xi) -> "Pose":
        return self @ se3_exp(xi)

    def orthonormalized(self) -> "Pose":
        return Pose(orthonormalize(self.R), self.t)


def se3_exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), _se3_v(phi) @ rho)


def se3_log(T: Pose) -> np.ndarray:
    phi = so3_log(T.R)
    rho = np.linalg.solve(_se3_v(phi), T.t)
    return np.concatenate([rho, phi])


def adjoint(T: Pose) -> np.ndarray:
    """6x6 adjoint for ``(rho, phi)`` ordering: ``T Exp(xi) T^-1 = Exp(Ad xi)``."""
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = T.R
    Ad[:3, 3:] = hat(T.t) @ T.R
    Ad[3:, 3:] = T.R
    return Ad


def rotation_angle(R: np.ndarray) -> float:
    return float(np.arccos(np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def normalized(self, x: np.ndarray) -> np.ndarray:
        """Pixel coordinates (..., 2) -> bearing vectors (..., 3) with unit z."""
        out = np.ones(x.shape[:-1] + (3,))
        out[..., 0] = (x[..., 0] - self.cx) / self.fx
        out[..., 1] = (x[..., 1] - self.cy) / self.fy
        return out

    def in_image(self, x: np.ndarray) -> np.ndarray:
        """True where a coordinate can be bilinearly sampled."""
        return ((x[..., 0] >= 0.0) & (x[..., 0] <= self.width - 1)
                & (x[..., 1] >= 0.0) & (x[..., 1] <= self.height - 1))


@dataclass(frozen=True)
class PixelGrid:
    """Row-major lattice of full-resolution pixel coordinates.

    Lattice node ``(r, c)`` sits on the integer pixel ``(s*c + s//2, s*r + s//2)``
    so that full-resolution maps can be read at lattice nodes without
    interpolation.
    """

    stride: int
    rows: int
    cols: int

    @classmethod
    def for_camera(cls, K: CameraIntrinsics, stride: int = 8) -> "PixelGrid":
        if stride < 1:
            raise ValueError("stride must be >= 1")
        return cls(stride, K.height // stride, K.width // stride)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def coords(self) -> np.ndarray:
        """(rows, cols, 2) pixel centres (u, v); read-only and shared."""
        return _grid_coords(self.stride, self.rows, self.cols)


@lru_cache(maxsize=32)
def _grid_coords(stride: int, rows: int, cols: int) -> np.ndarray:
    off = stride // 2
    uu, vv = np.meshgrid(stride * np.arange(cols) + off, stride * np.arange(rows) + off)
    out = np.stack([uu, vv], axis=-1).astype(float)
    out.flags.writeable = False
    return out


# Projected points closer than this (meters, in the target camera) are invalid.
MIN_DEPTH = 0.05


def _relative(T_i: Pose, T_j: Pose) -> tuple[np.ndarray, np.ndarray]:
    R_ji = T_j.R.T @ T_i.R
    t_ji = T_j.R.T @ (T_i.t - T_j.t)
    return R_ji, t_ji


def _scaled_points(T_i, T_j, d, x, K):
    """Point of pixel x in camera j, multiplied by the inverse depth d."""
    bearing = K.normalized(np.asarray(x, dtype=float))
    R_ji, t_ji = _relative(T_i, T_j)
    d = np.asarray(d, dtype=float)
    P = bearing @ R_ji.T + d[..., None] * t_ji
    return P, bearing, R_ji, t_ji


def _pinhole(P, K, d, in_image=True):
    z = P[..., 2]
    valid = (d > 0.0) & (z > MIN_DEPTH * d) & (z > 1e-12)
    zs = np.where(valid, z, 1.0)
    u = K.fx * P[..., 0] / zs + K.cx
    v = K.fy * P[..., 1] / zs + K.cy
    uv = np.stack([u, v], axis=-1)
    if in_image:
        valid &= K.in_image(uv)
    return uv, valid, zs


def project(T_i: Pose, T_j: Pose, d_i, x, K: CameraIntrinsics, in_image: bool = True):
    """Warp pixels ``x`` of view i with inverse depth ``d_i`` into view j.

    Returns ``(uv, valid)``.  Behind-camera results, and out-of-image ones
    unless ``in_image`` is false, are flagged in ``valid`` and left unclamped.
    """
    d_i = np.asarray(d_i, dtype=float)
    P, *_ = _scaled_points(T_i, T_j, d_i, x, K)
    uv, valid, _ = _pinhole(P, K, d_i, in_image)
    return uv, valid


def project_jacobians(T_i: Pose, T_j: Pose, d_i, x, K: CameraIntrinsics,
                      in_image: bool = True):
    """Projection with analytic Jacobians.

    Returns ``(uv, valid, J_i, J_j, J_d)`` with shapes (..., 2), (...),
    (..., 2, 6), (..., 2, 6) and (..., 2): derivatives of the projected
    coordinate with respect to local perturbations of ``T_i`` and ``T_j`` and
    to the inverse depth.
    """
    d_i = np.asarray(d_i, dtype=float)
    P, bearing, R_ji, t_ji = _scaled_points(T_i, T_j, d_i, x, K)
    uv, valid, z = _pinhole(P, K, d_i, in_image)

    J_proj = np.zeros(P.shape[:-1] + (2, 3))
    J_proj[..., 0, 0] = K.fx / z
    J_proj[..., 0, 2] = -K.fx * P[..., 0] / z**2
    J_proj[..., 1, 1] = K.fy / z
    J_proj[..., 1, 2] = -K.fy * P[..., 1] / z**2

    dP_i = np.zeros(P.shape[:-1] + (3, 6))
    dP_i[..., :, :3] = d_i[..., None, None] * R_ji
    dP_i[..., :, 3:] = -R_ji @ hat(bearing)
    dP_j = np.zeros(P.shape[:-1] + (3, 6))
    dP_j[..., :, :3] = -d_i[..., None, None] * np.eye(3)
    dP_j[..., :, 3:] = hat(P)

    J_i = J_proj @ dP_i
    J_j = J_proj @ dP_j
    J_d = J_proj @ t_ji
    return uv, valid, J_i, J_j, J_d
