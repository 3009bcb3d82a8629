"""Trajectory and surface metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import Tensor, as_tensor, record
from .datasets import MAX_TIME_GAP, Trajectory

CHAMFER_TAU = 1e-3  # m^2, soft-min temperature of the backward pass
CHAMFER_K = 8


class InsufficientDataError(ValueError):
    pass


@dataclass
class TrajectoryMetrics:
    ate_rmse: float
    rpe_rmse: float
    n_matched: int

    def as_dict(self) -> dict:
        return dict(ate_rmse=self.ate_rmse, rpe_rmse=self.rpe_rmse, n_matched=self.n_matched)


def match_timestamps(est: Trajectory, gt: Trajectory, max_gap: float = MAX_TIME_GAP):
    """Index pairs ``(i_est, i_gt)`` of nearest timestamps within ``max_gap``."""
    if len(gt) == 0 or len(est) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    order = np.argsort(gt.timestamps)
    ts = gt.timestamps[order]
    pos = np.clip(np.searchsorted(ts, est.timestamps), 1, max(len(ts) - 1, 1))
    left = np.clip(pos - 1, 0, len(ts) - 1)
    right = np.clip(pos, 0, len(ts) - 1)
    pick = np.where(np.abs(ts[left] - est.timestamps) <= np.abs(ts[right] - est.timestamps), left, right)
    ok = np.abs(ts[pick] - est.timestamps) <= max_gap
    return np.flatnonzero(ok), order[pick[ok]]


def _matched(est: Trajectory, gt: Trajectory):
    i, j = match_timestamps(est, gt)
    if len(i) < 2:
        raise InsufficientDataError(f"only {len(i)} poses could be matched by timestamp")
    return est.poses[i], gt.poses[j]


def align_rigid(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares rigid transform (4x4) mapping points ``src`` onto ``dst`` (Horn/Umeyama, no scale)."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ S @ U.T
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = mu_d - R @ mu_s
    return T


def ate(est: Trajectory, gt: Trajectory) -> float:
    """RMSE of camera positions after best-fit rigid alignment of ``est`` onto ``gt``."""
    pe, pg = _matched(est, gt)
    a, b = pe[:, :3, 3], pg[:, :3, 3]
    T = align_rigid(a, b)
    err = a @ T[:3, :3].T + T[:3, 3] - b
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1) -> float:
    """Translational RMSE of relative motions over ``delta`` frames."""
    pe, pg = _matched(est, gt)
    if len(pe) <= delta:
        raise InsufficientDataError(f"need more than {delta} matched poses")
    errs = []
    for k in range(len(pe) - delta):
        de = np.linalg.inv(pe[k]) @ pe[k + delta]
        dg = np.linalg.inv(pg[k]) @ pg[k + delta]
        errs.append(np.linalg.inv(dg) @ de)
    t = np.array([e[:3, 3] for e in errs])
    return float(np.sqrt(np.mean(np.sum(t**2, axis=1))))


def trajectory_metrics(est: Trajectory, gt: Trajectory) -> TrajectoryMetrics:
    return TrajectoryMetrics(ate(est, gt), rpe(est, gt), len(match_timestamps(est, gt)[0]))


def _directed(a: np.ndarray, b: np.ndarray, tau: float, k: int):
    """Hard nearest distances a -> b plus soft-min neighbour weights."""
    k = min(k, len(b))
    d2, idx = cKDTree(b).query(a, k=k)
    if k == 1:
        d2, idx = d2[:, None], idx[:, None]
    d2 = d2**2
    w = np.exp(-(d2 - d2[:, :1]) / tau)
    w /= w.sum(axis=1, keepdims=True)
    return d2[:, 0], idx, w


def chamfer(A, B, tau: float = CHAMFER_TAU, k: int = CHAMFER_K, reduction: str = "mean") -> Tensor:
    """Symmetric chamfer distance between N x D point sets,
    ``(mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2) / 2``.

    The forward value uses the exact nearest neighbour. The backward pass
    replaces the arg-min by soft-min weights ``softmax(-d^2 / tau)`` over the
    ``k`` nearest candidates, which agrees with the hard gradient away from
    ties and splits it evenly at exact ties. ``reduction="sum"`` sums instead
    of averaging within each direction.
    """
    A, B = as_tensor(A), as_tensor(B)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("chamfer distance of an empty point cloud")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"point clouds must be N x D with equal D, got {A.shape} and {B.shape}")
    a, b = A.data, B.data
    dab, iab, wab = _directed(a, b, tau, k)
    dba, iba, wba = _directed(b, a, tau, k)
    na = 2 * len(a) if reduction == "mean" else 2
    nb = 2 * len(b) if reduction == "mean" else 2
    value = dab.sum() / na + dba.sum() / nb

    def backward(g):
        ga = np.zeros_like(a)
        gb = np.zeros_like(b)
        # a -> b
        diff = a[:, None, :] - b[iab]
        contrib = 2.0 * wab[..., None] * diff / na
        ga += contrib.sum(axis=1)
        np.add.at(gb, iab.reshape(-1), -contrib.reshape(-1, a.shape[1]))
        # b -> a
        diff = b[:, None, :] - a[iba]
        contrib = 2.0 * wba[..., None] * diff / nb
        gb += contrib.sum(axis=1)
        np.add.at(ga, iba.reshape(-1), -contrib.reshape(-1, a.shape[1]))
        return g * ga, g * gb

    return record(np.asarray(value, dtype=float), (A, B), backward)
