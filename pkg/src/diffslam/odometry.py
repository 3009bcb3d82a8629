"""Frame-to-frame and frame-to-model alignment solved with the differentiable LM.

Twists are ordered (omega, v). An estimate maps source-camera points into
the target camera: ``p_t = T p_s``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    concat,
    cross,
    gather_bilinear,
    norm,
    segment_sum,
    sigmoid,
    stack,
    where,
)
from .datasets import Trajectory
from .frames import RGBDFrame
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    VertexNormalMaps,
    backproject_depth,
    project,
    se3_exp,
)
from .gradlm import GatingParams, LeastSquaresProblem, SolverTrace, solve_gradlm

logger = logging.getLogger(__name__)

DIST_THRESHOLD = 0.1
ANGLE_THRESHOLD_DEG = 30.0
GATE_STEEPNESS = 50.0
RANK_TOL = 1e-10
MODEL_VOXEL = 0.01


class TrackingError(RuntimeError):
    pass


class DegenerateGeometryError(TrackingError):
    """Alignment is under-constrained (normal equations of rank < 6)."""


class InsufficientOverlapError(TrackingError):
    """Too few valid correspondences to attempt an alignment."""


@dataclass
class OdometryEstimate:
    transform: RigidTransform  # source -> target
    trace: SolverTrace
    inlier_fraction: float


def _as_transform(T) -> RigidTransform:
    if T is None:
        return RigidTransform.identity()
    return T if isinstance(T, RigidTransform) else RigidTransform(T)


def _check_rank(J: np.ndarray, what: str) -> None:
    JtJ = J.T @ J
    ev = np.linalg.eigvalsh(JtJ)
    rank = int(np.sum(ev > RANK_TOL * max(ev.max(), 1e-300)))
    if rank < 6:
        raise DegenerateGeometryError(f"{what}: normal equations have rank {rank} < 6")


# ---------------------------------------------------------------------------
# point-to-plane ICP


def icp_gates(dist: Tensor, cos_angle: Tensor) -> Tensor:
    """Smooth replacements for the 0.1 m / 30 degree rejection thresholds."""
    cos_max = np.cos(np.deg2rad(ANGLE_THRESHOLD_DEG))
    w_d = sigmoid(GATE_STEEPNESS * (1.0 - dist / DIST_THRESHOLD))
    w_a = sigmoid(GATE_STEEPNESS * (1.0 - (1.0 - cos_angle) / (1.0 - cos_max)))
    return w_d * w_a


def icp_point_to_plane(
    source: VertexNormalMaps,
    target: VertexNormalMaps,
    K: CameraIntrinsics,
    T_init=None,
    iters: int = 10,
    gating: Optional[GatingParams] = None,
) -> OdometryEstimate:
    """Align ``source`` (its own camera frame) to ``target`` (target camera frame).

    Correspondences come from projecting transformed source points into the
    target image and bilinearly sampling its vertex and normal maps.
    """
    T0 = _as_transform(T_init)
    sel = np.flatnonzero(source.valid.reshape(-1))
    if sel.size < 6:
        raise InsufficientOverlapError(f"only {sel.size} valid source points")
    ps = source.vertices.reshape(-1, 3)[sel]
    ns = source.normals.reshape(-1, 3)[sel]
    state = {}

    def transformed(xi: Tensor):
        T = se3_exp(xi) @ T0
        return T.apply(ps), T.rotate(ns)

    def linearize(xi: Tensor):
        """Projective association and gate weights at ``xi``."""
        p, n_src = transformed(xi)
        uv, _, ok = project(p, K)
        q, m = gather_bilinear(target.vertices, uv, valid=target.valid)
        nq, _ = gather_bilinear(target.normals, uv, valid=target.valid)
        mask = ok & m
        nq = nq / norm(nq, axis=-1, keepdims=True, eps=1e-12)
        w = icp_gates(norm(p - q, axis=-1, eps=1e-12), (n_src * nq).sum(axis=-1))
        w = where(mask, w, 0.0)
        state["mask"] = mask
        state["w"] = w.data
        return q, nq, w, mask

    def residual(xi, ctx):
        q, nq, w, mask = ctx
        p, _ = transformed(xi)
        return where(mask, w * ((p - q) * nq).sum(axis=-1), 0.0)

    def jacobian(xi, ctx):
        _, nq, w, mask = ctx
        p, _ = transformed(xi)
        rows = concat([cross(p, nq), nq], axis=1) * w.reshape(-1, 1)
        return where(mask[:, None], rows, 0.0)

    x0 = Tensor(np.zeros(6))
    ctx0 = linearize(x0)
    if int(state["mask"].sum()) < 6:
        raise InsufficientOverlapError(f"only {int(state['mask'].sum())} associations")
    _check_rank(jacobian(x0, ctx0).data, "point-to-plane ICP")
    problem = LeastSquaresProblem(residual, x0, jacobian, linearize=linearize)
    trace = solve_gradlm(problem, iters, gating)
    T = se3_exp(trace.x) @ T0
    linearize(trace.x.detach())
    inliers = float(np.sum(state["w"] > 0.5) / sel.size)
    return OdometryEstimate(T, trace, inliers)


# ---------------------------------------------------------------------------
# photometric odometry


def _pad_edge(x: Tensor, axis: int, r: int) -> Tensor:
    n = x.shape[axis]
    first = x[(slice(None),) * axis + (slice(0, 1),)]
    last = x[(slice(None),) * axis + (slice(n - 1, n),)]
    return concat([first] * r + [x] + [last] * r, axis=axis)


_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def gaussian_blur(img: Tensor) -> Tensor:
    """Separable 5-tap binomial filter with edge replication (recorded)."""
    img = as_tensor(img)
    for axis in (0, 1):
        p = _pad_edge(img, axis, 2)
        n = img.shape[axis]
        acc = None
        for k, c in enumerate(_BINOMIAL):
            sl = [slice(None)] * p.ndim
            sl[axis] = slice(k, k + n)
            term = p[tuple(sl)] * c
            acc = term if acc is None else acc + term
        img = acc
    return img


def downsample(img: Tensor, valid: Optional[np.ndarray] = None):
    """2 x 2 block average; with ``valid`` only valid pixels are averaged.

    Returns ``(image, valid)`` at half resolution (odd edges are cropped).
    """
    img = as_tensor(img)
    H, W = img.shape[:2]
    h, w = H // 2, W // 2
    img = img[: 2 * h, : 2 * w]
    if valid is None:
        blocks = img.reshape(h, 2, w, 2).sum(axis=(1, 3)) * 0.25
        return blocks, np.ones((h, w), dtype=bool)
    v = np.asarray(valid, dtype=bool)[: 2 * h, : 2 * w]
    masked = where(v, img, 0.0)
    s = masked.reshape(h, 2, w, 2).sum(axis=(1, 3))
    cnt = v.reshape(h, 2, w, 2).sum(axis=(1, 3))
    out_valid = cnt > 0
    return s / np.maximum(cnt, 1).astype(float), out_valid


@dataclass
class PyramidLevel:
    intensity: Tensor
    depth: Tensor
    valid: np.ndarray
    K: CameraIntrinsics


def build_pyramid(frame: RGBDFrame, levels: int = 3) -> list[PyramidLevel]:
    """Finest-first list of levels; each level halves the resolution."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    I = frame.intensity()
    D = frame.depth
    V = frame.valid
    K = frame.intrinsics
    out = [PyramidLevel(I, where(V, D, 0.0), V, K)]
    for _ in range(levels - 1):
        I, _ = downsample(gaussian_blur(I))
        D, V = downsample(D, V)
        K = K.scaled(0.5)
        K = CameraIntrinsics(K.fx, K.fy, K.cx, K.cy, D.shape[1], D.shape[0])
        out.append(PyramidLevel(I, D, V, K))
    return out


def image_gradients(img: Tensor):
    """Central differences (one-sided on the border), recorded."""
    img = as_tensor(img)
    H, W = img.shape
    gx = concat([img[:, 1:2] - img[:, 0:1], (img[:, 2:] - img[:, :-2]) * 0.5, img[:, -1:] - img[:, -2:-1]], axis=1)
    gy = concat([img[1:2] - img[0:1], (img[2:] - img[:-2]) * 0.5, img[-1:] - img[-2:-1]], axis=0)
    return gx, gy


def _photometric_level(src: PyramidLevel, tgt: PyramidLevel, T0: RigidTransform, iters: int,
                       gating: Optional[GatingParams]):
    K = src.K
    sel = np.flatnonzero(src.valid.reshape(-1))
    if sel.size < 6:
        raise InsufficientOverlapError(f"only {sel.size} valid pixels at {K.width}x{K.height}")
    rays = Tensor(K.rays().reshape(-1, 3)[sel])
    ps = rays * src.depth.reshape(-1)[sel].reshape(-1, 1)
    Is = src.intensity.reshape(-1)[sel]
    gx, gy = image_gradients(tgt.intensity)
    grad_img = stack([gx, gy], axis=-1)
    state = {}

    def terms(xi):
        T = se3_exp(xi) @ T0
        p = T.apply(ps)
        uv, z, ok = project(p, tgt.K)
        It, m = gather_bilinear(tgt.intensity, uv)
        mask = ok & m
        state["mask"] = mask
        return p, uv, z, It, mask

    def residual(xi):
        _, _, _, It, mask = terms(xi)
        return where(mask, It - Is, 0.0)

    def jacobian(xi):
        p, uv, z, _, mask = terms(xi)
        g, _ = gather_bilinear(grad_img, uv)
        zs = where(mask, z, 1.0)
        gxf = g[:, 0] * tgt.K.fx
        gyf = g[:, 1] * tgt.K.fy
        a = stack([gxf / zs, gyf / zs, -(gxf * p[:, 0] + gyf * p[:, 1]) / (zs * zs)], axis=1)
        rows = concat([cross(p, a), a], axis=1)
        return where(mask[:, None], rows, 0.0)

    x0 = Tensor(np.zeros(6))
    J0 = jacobian(x0)
    if int(state["mask"].sum()) < 6:
        raise InsufficientOverlapError(f"only {int(state['mask'].sum())} pixels overlap")
    _check_rank(J0.data, "photometric odometry")
    trace = solve_gradlm(LeastSquaresProblem(residual, x0, jacobian), iters, gating)
    terms(trace.x.detach())
    return se3_exp(trace.x) @ T0, trace, float(state["mask"].sum() / sel.size)


def photometric_odometry(
    source: RGBDFrame,
    target: RGBDFrame,
    T_init=None,
    pyramid_levels: int = 3,
    iters: int = 10,
    gating: Optional[GatingParams] = None,
) -> OdometryEstimate:
    """Dense direct alignment minimising ``I_t(warp(u)) - I_s(u)``, coarse to fine."""
    if source.intrinsics != target.intrinsics:
        raise ValueError("source and target must share intrinsics")
    src = build_pyramid(source, pyramid_levels)
    tgt = build_pyramid(target, pyramid_levels)
    if not src[-1].valid.any():
        raise InsufficientOverlapError("no valid pixels at the coarsest pyramid level")
    T = _as_transform(T_init)
    trace, frac = None, 0.0
    for s, t in zip(reversed(src), reversed(tgt)):
        T, trace, frac = _photometric_level(s, t, T, iters, gating)
    return OdometryEstimate(T, trace, frac)


# ---------------------------------------------------------------------------
# point models and pipelines


def render_points(positions, normals, T_wc, K: CameraIntrinsics, active: Optional[np.ndarray] = None):
    """Z-buffered nearest-pixel splat of world points into a camera.

    Returns camera-frame :class:`VertexNormalMaps` (values on the tape with
    respect to ``positions``/``normals``) and the H x W index map (-1 where
    empty). Normals are flipped to face the camera.
    """
    positions, normals = as_tensor(positions), as_tensor(normals)
    T_cw = _as_transform(T_wc).detach().inverse()
    M = T_cw.numpy()
    pc = positions.data @ M[:3, :3].T + M[:3, 3]
    H, W = K.height, K.width
    idx_map = np.full((H, W), -1, dtype=np.int64)
    z = pc[:, 2]
    ok = z > 1e-6
    if active is not None:
        ok &= np.asarray(active, dtype=bool)
    zs = np.where(ok, z, 1.0)
    u = np.round(pc[:, 0] / zs * K.fx + K.cx)
    v = np.round(pc[:, 1] / zs * K.fy + K.cy)
    ok &= (u >= 0) & (u < W) & (v >= 0) & (v < H)
    cand = np.flatnonzero(ok)
    if cand.size:
        pix = (v[cand] * W + u[cand]).astype(np.int64)
        order = np.lexsort((z[cand], pix))
        pix_sorted = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        winners = cand[order[first]]
        idx_map.reshape(-1)[pix_sorted[first]] = winners
    valid = idx_map >= 0
    flat = np.flatnonzero(valid.reshape(-1))
    ids = idx_map.reshape(-1)[flat]
    R = Tensor(M[:3, :3])
    pts = positions[ids] @ R.T + M[:3, 3]
    nrm = normals[ids] @ R.T
    flip = np.where(np.sum(nrm.data * pts.data, axis=1) > 0, -1.0, 1.0)
    nrm = nrm * flip[:, None]
    verts = segment_sum(pts, flat, H * W).reshape(H, W, 3)
    nmap = segment_sum(nrm, flat, H * W).reshape(H, W, 3)
    return VertexNormalMaps(verts, nmap, valid), idx_map


class PointCloudModel:
    """World-frame point model thinned by a voxel hash (first point per cell)."""

    def __init__(self, voxel: float = MODEL_VOXEL):
        self.voxel = voxel
        self.positions = np.zeros((0, 3))
        self.normals = np.zeros((0, 3))
        self._keys: set = set()

    def __len__(self) -> int:
        return len(self.positions)

    def add(self, points: np.ndarray, normals: np.ndarray) -> None:
        keys = np.floor(points / self.voxel).astype(np.int64)
        _, first = np.unique(keys, axis=0, return_index=True)
        first.sort()
        keep = [i for i in first if tuple(keys[i]) not in self._keys]
        self._keys.update(tuple(keys[i]) for i in keep)
        self.positions = np.concatenate([self.positions, points[keep]])
        self.normals = np.concatenate([self.normals, normals[keep]])


def _world_points(maps: VertexNormalMaps, T_wc: np.ndarray):
    m = maps.valid.reshape(-1)
    p = maps.vertices.data.reshape(-1, 3)[m]
    n = maps.normals.data.reshape(-1, 3)[m]
    return p @ T_wc[:3, :3].T + T_wc[:3, 3], n @ T_wc[:3, :3].T


def _frames_list(frames: Iterable[RGBDFrame]) -> list:
    frames = list(frames)
    if len(frames) < 1:
        raise ValueError("sequence is empty")
    return frames


def run_icp_odometry(frames: Iterable[RGBDFrame], iters: int = 10, gating: Optional[GatingParams] = None,
                     initial_pose=None) -> tuple[Trajectory, list[OdometryEstimate]]:
    """Frame-to-frame ICP; returns the world trajectory and per-step estimates."""
    frames = _frames_list(frames)
    if len(frames) < 2:
        raise ValueError("ICP odometry needs at least two frames")
    pose = np.eye(4) if initial_pose is None else np.asarray(initial_pose, float)
    poses, ests = [pose], []
    prev = backproject_depth(frames[0].depth.data, frames[0].intrinsics, frames[0].valid)
    for k in range(1, len(frames)):
        cur = backproject_depth(frames[k].depth.data, frames[k].intrinsics, frames[k].valid)
        try:
            est = icp_point_to_plane(cur, prev, frames[k].intrinsics, None, iters, gating)
        except TrackingError as exc:
            raise type(exc)(f"frame {k}: {exc}") from exc
        pose = pose @ est.transform.numpy()
        poses.append(pose)
        ests.append(est)
        prev = cur
    return Trajectory([f.timestamp for f in frames], np.stack(poses)), ests


def run_icp_slam(frames: Iterable[RGBDFrame], iters: int = 10, gating: Optional[GatingParams] = None,
                 initial_pose=None, voxel: float = MODEL_VOXEL) -> tuple[Trajectory, PointCloudModel]:
    """Frame-to-model ICP against the accumulated global point cloud."""
    frames = _frames_list(frames)
    if len(frames) < 2:
        raise ValueError("ICP SLAM needs at least two frames")
    pose = np.eye(4) if initial_pose is None else np.asarray(initial_pose, float)
    model = PointCloudModel(voxel)
    first = backproject_depth(frames[0].depth.data, frames[0].intrinsics, frames[0].valid)
    model.add(*_world_points(first, pose))
    poses = [pose]
    for k in range(1, len(frames)):
        K = frames[k].intrinsics
        cur = backproject_depth(frames[k].depth.data, K, frames[k].valid)
        ref, _ = render_points(model.positions, model.normals, pose, K)
        try:
            est = icp_point_to_plane(cur, ref, K, None, iters, gating)
        except TrackingError as exc:
            raise type(exc)(f"frame {k}: {exc}") from exc
        pose = pose @ est.transform.numpy()
        poses.append(pose)
        model.add(*_world_points(cur, pose))
    return Trajectory([f.timestamp for f in frames], np.stack(poses)), model


__all__: Sequence[str] = [
    "DegenerateGeometryError",
    "InsufficientOverlapError",
    "OdometryEstimate",
    "PointCloudModel",
    "TrackingError",
    "build_pyramid",
    "icp_point_to_plane",
    "photometric_odometry",
    "render_points",
    "run_icp_odometry",
    "run_icp_slam",
]
