"""EuRoC ASL IMU CSV and TUM trajectory files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Pose
from .imu import ImuSamples

EUROC_HEADER = ("#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],"
                "a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]")
QUAT_NORM_TOL = 1e-3


class FormatError(ValueError):
    pass


@dataclass
class StampedTrajectory:
    t: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        if len(self.t) != len(self.poses):
            raise ValueError("one timestamp per pose required")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([T.t for T in self.poses]).reshape(-1, 3)


def load_euroc_imu(path) -> ImuSamples:
    """Read ``timestamp_ns,wx,wy,wz,ax,ay,az`` rows (comment lines start with ``#``)."""
    stamps, values = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split(",")
            if len(parts) != 7:
                raise FormatError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                stamps.append(int(parts[0]))
                values.append([float(p) for p in parts[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(values[-1])):
                raise FormatError(f"{path}:{lineno}: non-finite value")
            if len(stamps) > 1 and stamps[-1] <= stamps[-2]:
                raise FormatError(f"{path}:{lineno}: timestamps not strictly increasing")
    if not stamps:
        raise FormatError(f"{path}: no IMU samples")
    t_ns = np.array(stamps, dtype=np.int64)
    v = np.array(values)
    return ImuSamples(t_ns / 1e9, v[:, :3], v[:, 3:], t_ns=t_ns)


def write_euroc_imu(path, samples: ImuSamples) -> None:
    t_ns = samples.t_ns
    if t_ns is None:
        t_ns = np.round(np.asarray(samples.t) * 1e9).astype(np.int64)
    rows = [EUROC_HEADER]
    for k in range(len(samples)):
        vals = list(samples.gyro[k]) + list(samples.accel[k])
        rows.append(",".join([str(int(t_ns[k]))] + [repr(float(x)) for x in vals]))
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_tum(path) -> StampedTrajectory:
    """``timestamp tx ty tz qx qy qz qw`` per line; ``#`` starts a comment."""
    ts, poses = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                v = np.array([float(p) for p in parts])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(v)):
                raise FormatError(f"{path}:{lineno}: non-finite value")
            q = v[4:]
            norm = np.linalg.norm(q)
            if abs(norm - 1.0) > QUAT_NORM_TOL:
                raise FormatError(f"{path}:{lineno}: quaternion norm {norm:.6g} is not unit "
                                  f"(normalization error)")
            ts.append(v[0])
            poses.append(Pose(Rotation.from_quat(q / norm).as_matrix(), v[1:4]))
    return StampedTrajectory(np.array(ts), poses)


def format_tum_line(t: float, T: Pose) -> str:
    q = Rotation.from_matrix(T.R).as_quat()
    if q[3] < 0:
        q = -q
    # shortest exact decimal; the + 0.0 turns -0.0 into 0
    vals = " ".join(np.format_float_positional(x + 0.0, trim="-")
                    for x in np.concatenate([T.t, q]))
    return "%.9f %s" % (t, vals)


def write_tum(path, traj: StampedTrajectory) -> None:
    lines = [format_tum_line(float(t), T) for t, T in zip(traj.t, traj.poses)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
