"""Trajectory alignment, ATE and solver trace reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .formats import StampedTrajectory

ASSOC_TOL = 0.01   # seconds
TRACE_COLUMNS = ("iteration", "cost_reproj", "cost_featmetric", "cost_inertial",
                 "mean_w_r", "mean_w_f", "w_u", "lambda", "accepted")


class AlignmentError(ValueError):
    pass


@dataclass
class AlignmentResult:
    R: np.ndarray
    t: np.ndarray
    scale: float
    residuals: np.ndarray     # per-pose position error norms (m)
    rmse: float
    mode: str

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.scale * p @ self.R.T + self.t


def associate(est_t, ref_t, tol: float = ASSOC_TOL):
    """Index pairs matching each estimate stamp to the nearest reference stamp."""
    est_t = np.asarray(est_t, float)
    ref_t = np.asarray(ref_t, float)
    if ref_t.size == 0:
        return np.zeros(0, int), np.zeros(0, int)
    order = np.argsort(ref_t)
    sorted_t = ref_t[order]
    pos = np.clip(np.searchsorted(sorted_t, est_t), 1, len(sorted_t) - 1) if len(
        sorted_t) > 1 else np.zeros(len(est_t), int)
    left = np.maximum(pos - 1, 0)
    pick = np.where(np.abs(sorted_t[left] - est_t) <= np.abs(sorted_t[pos] - est_t), left, pos)
    ok = np.abs(sorted_t[pick] - est_t) <= tol
    return np.flatnonzero(ok), order[pick[ok]]


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool):
    """Least-squares ``dst ~ s R src + t``."""
    n = src.shape[0]
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    if np.linalg.matrix_rank(xs, tol=1e-9 * max(1.0, np.abs(xs).max())) < 2:
        raise AlignmentError("degenerate correspondences: positions are collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / np.mean(np.sum(xs**2, axis=1))) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return R, t, s


def align(estimate: StampedTrajectory, reference: StampedTrajectory, mode: str = "se3",
          tol: float = ASSOC_TOL) -> AlignmentResult:
    if mode not in ("se3", "sim3"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    ie, ir = associate(estimate.t, reference.t, tol)
    if ie.size < 3:
        raise AlignmentError(f"only {ie.size} associated poses; at least 3 required")
    src = estimate.positions[ie]
    dst = reference.positions[ir]
    R, t, s = umeyama(src, dst, mode == "sim3")
    res = np.linalg.norm(s * src @ R.T + t - dst, axis=1)
    return AlignmentResult(R, t, s, res, float(np.sqrt(np.mean(res**2))), mode)


def ate(estimate: StampedTrajectory, reference: StampedTrajectory, mode: str = "se3") -> float:
    return align(estimate, reference, mode).rmse


@dataclass
class TraceReport:
    rows: list
    ratio: np.ndarray         # mean_w_f / mean_w_r per row
    mean_w_r: np.ndarray
    mean_w_f: np.ndarray

    @property
    def final_ratio(self) -> float:
        return float(self.ratio[-1])

    def summary(self) -> dict:
        return {"rows": len(self.rows),
                "accepted": int(sum(r.accepted for r in self.rows)),
                "initial_ratio": float(self.ratio[0]),
                "final_ratio": self.final_ratio,
                "final_mean_w_r": float(self.mean_w_r[-1]),
                "final_mean_w_f": float(self.mean_w_f[-1])}

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.rows:
            w.writerow([r.iteration, repr(r.cost_reproj), repr(r.cost_featmetric),
                        repr(r.cost_inertial), repr(r.mean_w_r), repr(r.mean_w_f), repr(r.w_u),
                        repr(r.lam), int(r.accepted)])
        return buf.getvalue()


def trace_report(trace) -> TraceReport:
    rows = list(trace)
    if not rows:
        raise ValueError("empty trace")
    wr = np.array([r.mean_w_r for r in rows])
    wf = np.array([r.mean_w_f for r in rows])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(wr > 0, wf / np.where(wr > 0, wr, 1.0), np.nan)
    return TraceReport(rows, ratio, wr, wf)
