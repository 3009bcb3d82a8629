"""Dense TSDF volumes: smooth-truncated measurement, weighted fusion and
differentiable raycasting with Gaussian ray pooling.

Signed distances are positive in front of the observed surface (free
space) and negative behind it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .autodiff import (
    Tensor,
    as_tensor,
    clamp_smooth,
    gather_bilinear,
    gather_trilinear,
    no_grad,
    norm,
    record,
    sigmoid,
    stack,
    where,
)
from .datasets import Trajectory
from .frames import RGBDFrame
from .geometry import CameraIntrinsics, RigidTransform, VertexNormalMaps, backproject, project
from .gradlm import GatingParams
from .odometry import TrackingError, icp_point_to_plane

BETA = float(np.log(39.0))  # trunc_smooth(mu) = 0.95
W_CAP = 64.0
_CAP_POWER = 8
MIN_VIEW_WEIGHT = 0.1


def trunc_smooth(sdf, mu: float) -> Tensor:
    """``2 / (1 + exp(-beta s / mu)) - 1``: odd, increasing, bounded by 1."""
    return (as_tensor(sdf) * (BETA / (2.0 * mu))).tanh()


def band_weight(sdf, mu: float) -> Tensor:
    """Logistic replacement for the ``sdf >= -mu`` cutoff (0.5 at ``-mu``)."""
    return sigmoid((as_tensor(sdf) + mu) * (BETA / mu))


def smooth_cap(w, cap: float = W_CAP) -> Tensor:
    """Smooth ``min(w, cap)`` for ``w >= 0``: ``w / (1 + (w/cap)^8)^(1/8)``."""
    w = as_tensor(w)
    return w / ((w * (1.0 / cap)) ** _CAP_POWER + 1.0) ** (1.0 / _CAP_POWER)


@dataclass
class TSDFVolume:
    origin: np.ndarray  # centre of voxel (0, 0, 0), world frame
    voxel_size: float
    dims: tuple
    mu: float
    tsdf: Tensor
    weight: Tensor

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.dims = tuple(int(d) for d in self.dims)
        self.tsdf = as_tensor(self.tsdf)
        self.weight = as_tensor(self.weight)
        if self.mu < 2 * self.voxel_size - 1e-12:
            raise ValueError("mu must be at least two voxels")
        if self.tsdf.shape != self.dims or self.weight.shape != self.dims:
            raise ValueError("tsdf/weight shape does not match dims")

    @classmethod
    def empty(cls, origin, voxel_size: float, dims, mu: Optional[float] = None) -> "TSDFVolume":
        dims = tuple(int(d) for d in dims)
        mu = 3.0 * voxel_size if mu is None else mu
        return cls(np.asarray(origin, float), voxel_size, dims, mu, np.ones(dims), np.zeros(dims))

    @classmethod
    def around(cls, center, extent: float, n: int, mu: Optional[float] = None) -> "TSDFVolume":
        """Cubic volume of ``n^3`` voxels spanning ``extent`` metres around ``center``."""
        vs = extent / n
        origin = np.asarray(center, float) - extent / 2 + vs / 2
        return cls.empty(origin, vs, (n, n, n), mu)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def centers(self) -> np.ndarray:
        idx = np.stack(np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij"), axis=-1)
        return self.origin + idx.reshape(-1, 3) * self.voxel_size

    def to_index(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.origin) / self.voxel_size

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin, self.origin + (np.array(self.dims) - 1) * self.voxel_size

    def active_mask(self) -> np.ndarray:
        return (self.weight.data > 1e-3) & (np.abs(self.tsdf.data) < 0.95)

    def active_count(self) -> int:
        return int(self.active_mask().sum())

    def detach(self) -> "TSDFVolume":
        return TSDFVolume(self.origin.copy(), self.voxel_size, self.dims, self.mu,
                          self.tsdf.data.copy(), self.weight.data.copy())

    def save(self, path) -> None:
        header = dict(origin=self.origin.tolist(), voxel_size=self.voxel_size, dims=list(self.dims), mu=self.mu)
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode() + b"\n")
            fh.write(np.ascontiguousarray(self.tsdf.data, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.weight.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "TSDFVolume":
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        h = json.loads(raw[:nl])
        dims = tuple(h["dims"])
        n = int(np.prod(dims))
        arr = np.frombuffer(raw[nl + 1 :], dtype="<f8")
        if arr.size != 2 * n:
            raise ValueError(f"{path}: expected {2 * n} values, found {arr.size}")
        return cls(np.array(h["origin"]), h["voxel_size"], dims, h["mu"],
                   arr[:n].reshape(dims).copy(), arr[n:].reshape(dims).copy())


@dataclass
class TSDFMeasurement:
    sdf: Tensor  # truncated, per voxel (flattened)
    weight: Tensor  # per voxel (flattened)
    raw_sdf: Tensor


def _pose(T) -> RigidTransform:
    if T is None:
        return RigidTransform.identity()
    return T if isinstance(T, RigidTransform) else RigidTransform(T)


def tsdf_measure(volume: TSDFVolume, frame: RGBDFrame, T_wc=None,
                 maps: Optional[VertexNormalMaps] = None) -> TSDFMeasurement:
    """Per-voxel truncated signed distance and fusion weight for one frame.

    Depth is looked up with bilinear interpolation at each voxel's subpixel
    projection. The weight combines the logistic band cutoff, a smooth clamp
    of the viewing cosine and the validity of the lookup.
    """
    K = frame.intrinsics
    T = _pose(T_wc)
    maps = maps or backproject(frame)
    pc = T.inverse().apply(volume.centers())
    uv, z, ok = project(pc, K)
    depth, m = gather_bilinear(frame.depth, uv, valid=frame.valid)
    nrm, nm = gather_bilinear(maps.normals, uv, valid=maps.valid)
    mask = ok & m & nm
    s = where(mask, depth - z, 0.0)
    ray = pc / norm(pc, axis=-1, keepdims=True, eps=1e-12)
    cosang = ((nrm * ray).sum(axis=-1)).abs()
    cosang = cosang / norm(nrm, axis=-1, eps=1e-12)
    w = band_weight(s, volume.mu) * clamp_smooth(cosang, MIN_VIEW_WEIGHT, 1.0)
    w = where(mask, w, 0.0)
    return TSDFMeasurement(trunc_smooth(s, volume.mu), w, s)


def tsdf_fuse(volume: TSDFVolume, meas: TSDFMeasurement) -> TSDFVolume:
    """Running weighted average; the accumulated weight is softly capped."""
    W = volume.weight.reshape(-1)
    t = volume.tsdf.reshape(-1)
    Wn = W + meas.weight
    pos = Wn.data > 0
    safe = where(pos, Wn, 1.0)
    fused = where(pos, (W * t + meas.weight * meas.sdf) / safe, t)
    return TSDFVolume(volume.origin, volume.voxel_size, volume.dims, volume.mu,
                      fused.reshape(*volume.dims), smooth_cap(Wn).reshape(*volume.dims))


def integrate(volume: TSDFVolume, frame: RGBDFrame, T_wc=None, maps=None) -> TSDFVolume:
    return tsdf_fuse(volume, tsdf_measure(volume, frame, T_wc, maps))


# ---------------------------------------------------------------------------
# raycasting


def ray_differential(vc, vl, vr, vu, vd, valid_l=True, valid_r=True, valid_u=True, valid_d=True):
    """Central difference ``((v_r - v_l) / 2, (v_u - v_d) / 2)`` of ray values.

    "Up" is the +y (row) direction. Where a neighbour is invalid the
    one-sided difference against the centre is used instead, and where both
    are invalid the component is 0. Returns ``(grad [..., 2], one_sided)``.
    """
    vc, vl, vr, vu, vd = (np.asarray(v, float) for v in (vc, vl, vr, vu, vd))
    vl_, vr_, vu_, vd_ = (np.broadcast_to(np.asarray(b, bool), vc.shape) for b in (valid_l, valid_r, valid_u, valid_d))

    def axis(lo, hi, ok_lo, ok_hi):
        both = ok_lo & ok_hi
        return np.where(both, (hi - lo) / 2, np.where(ok_hi, hi - vc, np.where(ok_lo, vc - lo, 0.0)))

    g = np.stack([axis(vl, vr, vl_, vr_), axis(vd, vu, vd_, vu_)], axis=-1)
    return g, ~((vl_ & vr_) & (vu_ & vd_))


def image_ray_differential(values: np.ndarray, valid: np.ndarray):
    """Apply :func:`ray_differential` at every pixel of an H x W value image."""
    v = np.asarray(values, float)
    ok = np.asarray(valid, bool)
    pad_v = np.pad(v, 1)
    pad_ok = np.pad(ok, 1)
    return ray_differential(
        v,
        pad_v[1:-1, :-2], pad_v[1:-1, 2:], pad_v[2:, 1:-1], pad_v[:-2, 1:-1],
        pad_ok[1:-1, :-2], pad_ok[1:-1, 2:], pad_ok[2:, 1:-1], pad_ok[:-2, 1:-1],
    )


@dataclass
class RayBundle:
    origins: np.ndarray  # N x 3 world
    directions: np.ndarray  # N x 3 unit, world
    directions_cam: np.ndarray  # N x 3 unit, camera
    pixel_coords: np.ndarray  # N x 2
    step_size: float
    max_depth: float

    def __post_init__(self):
        if not np.allclose(np.linalg.norm(self.directions, axis=1), 1.0, atol=1e-9):
            raise ValueError("ray directions must be unit length")


def make_rays(T_wc, K: CameraIntrinsics, step_size: float, max_depth: float, pixel_coords=None) -> RayBundle:
    M = _pose(T_wc).numpy()
    if pixel_coords is None:
        u, v = K.pixel_grid()
        pixel_coords = np.stack([u, v], axis=-1).reshape(-1, 2)
    pc = np.asarray(pixel_coords, float).reshape(-1, 2)
    d = np.stack([(pc[:, 0] - K.cx) / K.fx, (pc[:, 1] - K.cy) / K.fy, np.ones(len(pc))], axis=1)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return RayBundle(np.broadcast_to(M[:3, 3], d.shape).copy(), d @ M[:3, :3].T, d, pc, step_size, max_depth)


@dataclass
class RaycastResult:
    maps: VertexNormalMaps  # camera frame
    depth: Tensor  # H x W z-depth of the zero crossing
    value: Tensor  # H x W Gaussian-pooled tsdf value
    valid: np.ndarray  # crossing found
    value_valid: np.ndarray


def _ray_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    return np.maximum(tmin, 0.0), tmax


def raycast(volume: TSDFVolume, T_wc, K: CameraIntrinsics, step_size: Optional[float] = None,
            max_depth: float = 10.0, ref_depth=None, pool_sigma: Optional[float] = None,
            pixel_coords: Optional[Tensor] = None) -> RaycastResult:
    """March every pixel ray through the volume.

    The first positive-to-negative sign change (between observed samples)
    is refined by one linear interpolation; vertices and normals (tsdf
    gradient) are differentiable in the volume. The pooled value at a pixel
    is the Gaussian-weighted mean of all tsdf samples along its ray,
    centred on ``ref_depth`` (the raycast depth if omitted) with width
    ``pool_sigma`` (one voxel by default). If ``pixel_coords`` (H x W x 2,
    tensor) is given, the pooled value receives a custom backward rule with
    respect to it built from neighbouring rays' values.
    """
    vs = volume.voxel_size
    step = vs / 2 if step_size is None else step_size
    if step > vs / 2 + 1e-12:
        raise ValueError("step_size must not exceed half a voxel")
    sigma = vs if pool_sigma is None else pool_sigma
    H, W = K.height, K.width
    pix = None if pixel_coords is None else as_tensor(pixel_coords).data.reshape(-1, 2)
    rays = make_rays(T_wc, K, step, max_depth, pix)
    lo, hi = volume.bounds()
    t_in, t_out = _ray_box(rays.origins, rays.directions, lo, hi)
    t_out = np.minimum(t_out, max_depth)
    hit_box = t_out > t_in
    n_steps = int(np.ceil(np.max(np.where(hit_box, t_out - t_in, 0.0)) / step)) + 1 if hit_box.any() else 2
    ks = np.arange(n_steps)
    t = t_in[:, None] + ks[None, :] * step  # N x S
    inside = hit_box[:, None] & (t <= t_out[:, None])
    pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    idx = volume.to_index(pts.reshape(-1, 3))
    observed = volume.weight.data > 0
    with no_grad():
        vals, m = gather_trilinear(volume.tsdf.data, idx, valid=observed)
    vals = vals.data.reshape(t.shape)
    m = m.reshape(t.shape) & inside
    crossing = m[:, :-1] & m[:, 1:] & (vals[:, :-1] > 0) & (vals[:, 1:] <= 0)
    found = crossing.any(axis=1)
    first = np.argmax(crossing, axis=1)
    rows = np.arange(len(t))
    ta = np.where(found, t[rows, first], 0.0)
    pa = rays.origins + ta[:, None] * rays.directions
    pb = pa + step * rays.directions
    fa, _ = gather_trilinear(volume.tsdf, volume.to_index(pa[found]))
    fb, _ = gather_trilinear(volume.tsdf, volume.to_index(pb[found]))
    denom = fa - fb
    denom = where(np.abs(denom.data) > 1e-12, denom, 1e-12)
    t_hit = ta[found] + step * fa / denom
    dirs_c = rays.directions_cam[found]
    v_cam = t_hit.reshape(-1, 1) * dirs_c
    # normals from central differences of the field
    p_hit = rays.origins[found] + t_hit.data[:, None] * rays.directions[found]
    t_hit_w = rays.origins[found] + t_hit.reshape(-1, 1) * rays.directions[found]
    grads = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = vs
        fp, _ = gather_trilinear(volume.tsdf, (t_hit_w + e - volume.origin) * (1.0 / vs))
        fm, _ = gather_trilinear(volume.tsdf, (t_hit_w - e - volume.origin) * (1.0 / vs))
        grads.append(fp - fm)
    g = stack(grads, axis=1)
    R_cw = _pose(T_wc).numpy()[:3, :3].T
    n_cam = g @ Tensor(R_cw).T
    n_cam = n_cam / norm(n_cam, axis=-1, keepdims=True, eps=1e-12)
    del p_hit
    flat = np.flatnonzero(found)
    n_pix = len(t)
    verts = _scatter(v_cam, flat, n_pix)
    nrms = _scatter(n_cam, flat, n_pix)
    depth = _scatter(v_cam[:, 2].reshape(-1, 1), flat, n_pix)[:, 0]
    valid = found.reshape(H, W)

    # Gaussian pooling along the ray around the reference depth
    if ref_depth is None:
        ref = depth.data
        ref_ok = found
    else:
        ref = as_tensor(ref_depth).data.reshape(-1)
        ref_ok = np.isfinite(ref) & (ref > 0)
    z = t * rays.directions_cam[:, 2:3]
    gw = np.exp(-((z - ref[:, None]) ** 2) / (2 * sigma**2)) * m * ref_ok[:, None]
    gsum = gw.sum(axis=1)
    value_ok = gsum > 1e-12
    psi, _ = gather_trilinear(volume.tsdf, idx, valid=observed)
    psi = psi.reshape(*t.shape)
    norm_w = gw / np.where(value_ok, gsum, 1.0)[:, None]
    value = (psi * norm_w).sum(axis=1)
    if pixel_coords is not None:
        value = _pixel_grad_op(value, as_tensor(pixel_coords), value_ok.reshape(H, W))
    maps = VertexNormalMaps(verts.reshape(H, W, 3), nrms.reshape(H, W, 3), valid)
    return RaycastResult(maps, depth.reshape(H, W), value.reshape(H, W), valid, value_ok.reshape(H, W))


def _scatter(rows: Tensor, flat: np.ndarray, n: int) -> Tensor:
    from .autodiff import segment_sum

    return segment_sum(rows, flat, n)


def _pixel_grad_op(value: Tensor, pixel_coords: Tensor, valid: np.ndarray) -> Tensor:
    """Pass-through of ``value`` whose gradient w.r.t. the pixel coordinates
    is given by the ray differential of the value image."""
    shape = valid.shape
    dv, _ = image_ray_differential(value.data.reshape(shape), valid)

    def bw(g):
        gi = g.reshape(shape)
        gp = (dv * gi[..., None]).reshape(pixel_coords.shape)
        return g, gp

    return record(value.data, (value, pixel_coords), bw)


# ---------------------------------------------------------------------------
# pipeline and export


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray


def extract_mesh(volume: TSDFVolume) -> Mesh:
    """Zero level set by marching cubes (export only, not differentiable)."""
    from skimage.measure import marching_cubes

    vol = volume.tsdf.data
    observed = volume.weight.data > 1e-3
    if not (observed.any() and vol[observed].min() < 0 < vol[observed].max()):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
    verts, faces, normals, _ = marching_cubes(vol, level=0.0, spacing=(volume.voxel_size,) * 3)
    # keep vertices whose cube edge joins two observed voxels
    idx = verts / volume.voxel_size
    lo = np.clip(np.floor(idx + 1e-6).astype(np.int64), 0, np.array(vol.shape) - 1)
    hi = np.clip(np.ceil(idx - 1e-6).astype(np.int64), 0, np.array(vol.shape) - 1)
    keep = observed[tuple(lo.T)] & observed[tuple(hi.T)]
    faces = faces[keep[faces].all(axis=1)]
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts, normals, faces = verts[used], normals[used], remap[faces]
    return Mesh(verts + volume.origin, faces.astype(np.int64), normals)


class KinectFusionTrackingError(TrackingError):
    def __init__(self, msg: str, trajectory: Trajectory, volume: TSDFVolume):
        super().__init__(msg)
        self.trajectory = trajectory
        self.volume = volume


def run_kinectfusion(frames: Iterable[RGBDFrame], volume: TSDFVolume, iters: int = 10,
                     gating: Optional[GatingParams] = None, initial_pose=None,
                     track: bool = True) -> tuple[Trajectory, TSDFVolume, Mesh]:
    """Alternate raycast + ICP tracking against the model and TSDF fusion.

    On a tracking failure a :class:`KinectFusionTrackingError` carrying the
    trajectory up to the last good pose is raised.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("sequence is empty")
    pose = np.eye(4) if initial_pose is None else np.asarray(initial_pose, float)
    poses, stamps = [], []
    for k, frame in enumerate(frames):
        maps = backproject(frame)
        if k > 0 and track:
            with no_grad():
                model = raycast(volume, pose, frame.intrinsics)
                try:
                    est = icp_point_to_plane(maps, model.maps, frame.intrinsics, None, iters, gating)
                except TrackingError as exc:
                    traj = Trajectory(stamps, np.array(poses).reshape(-1, 4, 4))
                    raise KinectFusionTrackingError(f"frame {k}: {exc}", traj, volume) from exc
            pose = pose @ est.transform.numpy()
        poses.append(pose)
        stamps.append(frame.timestamp)
        volume = integrate(volume, frame, pose, maps)
    return Trajectory(stamps, np.stack(poses)), volume, extract_mesh(volume)
