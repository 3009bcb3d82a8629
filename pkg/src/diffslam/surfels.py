"""Surfel maps with confidence-weighted fusion (PointFusion-style)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .autodiff import Tensor, as_tensor, concat, no_grad, norm, segment_sum, softplus
from .datasets import Trajectory
from .fusion import K_MAX, frustum_cull, soft_associate
from .frames import RGBDFrame
from .geometry import CameraIntrinsics, RigidTransform, VertexNormalMaps, backproject
from .gradlm import GatingParams
from .odometry import TrackingError, icp_point_to_plane, render_points

RADIAL_SIGMA = 0.6
MIN_NZ = 0.2
_NZ_SHARPNESS = 50.0


@dataclass
class Surfel:
    position: np.ndarray
    normal: np.ndarray
    color: np.ndarray
    radius: float
    confidence: float
    last_seen: int = 0


@dataclass
class SurfelMap:
    """Struct-of-arrays surfel storage; every field may carry gradients."""

    positions: Tensor = field(default_factory=lambda: Tensor(np.zeros((0, 3))))
    normals: Tensor = field(default_factory=lambda: Tensor(np.zeros((0, 3))))
    colors: Tensor = field(default_factory=lambda: Tensor(np.zeros((0, 3))))
    radii: Tensor = field(default_factory=lambda: Tensor(np.zeros(0)))
    confidences: Tensor = field(default_factory=lambda: Tensor(np.zeros(0)))
    last_seen: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    frame_count: int = 0

    def __len__(self) -> int:
        return self.positions.shape[0]

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.positions.data[i].copy(), self.normals.data[i].copy(), self.colors.data[i].copy(),
                      float(self.radii.data[i]), float(self.confidences.data[i]), int(self.last_seen[i]))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in
                   (self.positions, self.normals, self.colors, self.radii, self.confidences))

    def detach(self) -> "SurfelMap":
        return SurfelMap(*(Tensor(t.data.copy()) for t in
                           (self.positions, self.normals, self.colors, self.radii, self.confidences)),
                         self.last_seen.copy(), self.frame_count)


def radial_confidence(K: CameraIntrinsics) -> np.ndarray:
    """``exp(-gamma^2 / 2 sigma^2)`` with gamma the radius normalised to 1 at the corners."""
    u, v = K.pixel_grid()
    gamma2 = ((u - K.cx) ** 2 + (v - K.cy) ** 2) / (K.cx**2 + K.cy**2)
    return np.exp(-gamma2 / (2 * RADIAL_SIGMA**2))


def surfel_radius(depth, normal_z, focal: float) -> Tensor:
    """``d / (f * max_smooth(|n_z|, 0.2))``."""
    nz = as_tensor(normal_z).abs()
    soft = MIN_NZ + softplus(_NZ_SHARPNESS * (nz - MIN_NZ)) / _NZ_SHARPNESS
    return as_tensor(depth) / (soft * focal)


@dataclass
class SurfelMeasurement:
    """Per-pixel surfels of one frame, world frame, flattened to H*W rows."""

    positions: Tensor
    normals: Tensor
    colors: Tensor
    radii: Tensor
    confidences: Tensor
    valid: np.ndarray  # H*W
    maps: VertexNormalMaps  # camera-frame maps used for association


def surfels_from_frame(frame: RGBDFrame, T_wc=None, maps: Optional[VertexNormalMaps] = None) -> SurfelMeasurement:
    T = RigidTransform.identity() if T_wc is None else (T_wc if isinstance(T_wc, RigidTransform) else RigidTransform(T_wc))
    K = frame.intrinsics
    maps = maps or backproject(frame)
    verts = maps.vertices.reshape(-1, 3)
    nrm = maps.normals.reshape(-1, 3)
    valid = maps.valid.reshape(-1)
    radius = surfel_radius(verts[:, 2], nrm[:, 2], K.fx)
    conf = radial_confidence(K).reshape(-1) * valid
    return SurfelMeasurement(T.apply(verts), T.rotate(nrm), frame.color.reshape(-1, 3), radius,
                             Tensor(conf), valid, maps)


def surfel_from_pixel(frame: RGBDFrame, pixel, T_wc=None) -> Optional[Surfel]:
    """Surfel for pixel ``(u, v)``; None when the pixel is invalid."""
    u, v = int(pixel[0]), int(pixel[1])
    m = surfels_from_frame(frame, T_wc)
    i = v * frame.intrinsics.width + u
    if not m.valid[i]:
        return None
    return Surfel(m.positions.data[i].copy(), m.normals.data[i].copy(), m.colors.data[i].copy(),
                  float(m.radii.data[i]), float(m.confidences.data[i]))


def _append(map_: SurfelMap, meas: SurfelMeasurement, rows: np.ndarray, frame_index: int) -> SurfelMap:
    return SurfelMap(
        concat([map_.positions, meas.positions[rows]]),
        concat([map_.normals, meas.normals[rows]]),
        concat([map_.colors, meas.colors[rows]]),
        concat([map_.radii, meas.radii[rows]]),
        concat([map_.confidences, meas.confidences[rows]]),
        np.concatenate([map_.last_seen, np.full(len(rows), frame_index, dtype=np.int64)]),
        map_.frame_count,
    )


def surfel_fuse(map_: SurfelMap, meas: SurfelMeasurement, association=None, frame_index: Optional[int] = None) -> SurfelMap:
    """Confidence-weighted averaging of matched surfels; unmatched pixels append.

    Pixel ``i`` contributes ``w_ij * c_i`` to element ``j``::

        p_j' = (c_j p_j + sum_i w_ij c_i p_i) / (c_j + sum_i w_ij c_i)
        c_j' = c_j + sum_i w_ij c_i

    Normals are averaged the same way and renormalised.
    """
    fi = map_.frame_count if frame_index is None else frame_index
    n = len(map_)
    if association is None or n == 0:
        out = _append(map_, meas, np.flatnonzero(meas.valid), fi)
        out.frame_count = map_.frame_count + 1
        return out
    a = association
    wc = a.weight * meas.confidences[a.pixel]
    add_c = segment_sum(wc, a.element, n)
    c_new = map_.confidences + add_c
    denom = c_new.reshape(-1, 1)
    denom = denom + (denom.data == 0) * 1.0  # untouched zero-confidence rows

    def blend(old: Tensor, new: Tensor) -> Tensor:
        acc = segment_sum(new[a.pixel] * wc.reshape(-1, 1), a.element, n)
        return (old * map_.confidences.reshape(-1, 1) + acc) / denom

    pos = blend(map_.positions, meas.positions)
    nrm = blend(map_.normals, meas.normals)
    nrm = nrm / norm(nrm, axis=-1, keepdims=True, eps=1e-24)
    col = blend(map_.colors, meas.colors)
    rad = blend(map_.radii.reshape(-1, 1), meas.radii.reshape(-1, 1)).reshape(-1)
    seen = map_.last_seen.copy()
    seen[np.unique(a.element)] = fi
    fused = SurfelMap(pos, nrm, col, rad, c_new, seen, map_.frame_count)
    out = _append(fused, meas, a.new_pixels, fi)
    out.frame_count = map_.frame_count + 1
    return out


def integrate_frame(map_: SurfelMap, frame: RGBDFrame, T_wc, sigma=None, k_max: int = K_MAX,
                    maps: Optional[VertexNormalMaps] = None) -> SurfelMap:
    """Measure, cull, associate and fuse one frame."""
    meas = surfels_from_frame(frame, T_wc, maps)
    if len(map_) == 0:
        return surfel_fuse(map_, meas, None)
    active = frustum_cull(map_.positions, T_wc, frame.intrinsics, meas.valid.reshape(frame.shape))
    if active.empty:
        return surfel_fuse(map_, meas, None)
    assoc = soft_associate(meas.maps, active, frame.intrinsics, sigma, k_max)
    return surfel_fuse(map_, meas, assoc)


def remove_stale(map_: SurfelMap, max_age: int, min_confidence: float) -> SurfelMap:
    """Drop unstable surfels not seen for ``max_age`` frames (not differentiable)."""
    age = map_.frame_count - 1 - map_.last_seen
    keep = np.flatnonzero(~((age > max_age) & (map_.confidences.data < min_confidence)))
    return SurfelMap(map_.positions[keep], map_.normals[keep], map_.colors[keep], map_.radii[keep],
                     map_.confidences[keep], map_.last_seen[keep], map_.frame_count)


def run_pointfusion(frames: Iterable[RGBDFrame], iters: int = 10, gating: Optional[GatingParams] = None,
                    initial_pose=None, sigma=None, track: bool = True) -> tuple[Trajectory, SurfelMap]:
    """Frame-to-model tracking against the surfel map, then fusion.

    With ``track=False`` every frame is fused at the initial pose (static
    camera), which isolates the mapping stage.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("sequence is empty")
    pose = np.eye(4) if initial_pose is None else np.asarray(initial_pose, float)
    smap = SurfelMap()
    poses = []
    for k, frame in enumerate(frames):
        maps = backproject(frame)
        if k > 0 and track:
            with no_grad():
                ref, _ = render_points(smap.positions.data, smap.normals.data, pose, frame.intrinsics)
                try:
                    est = icp_point_to_plane(maps, ref, frame.intrinsics, None, iters, gating)
                except TrackingError as exc:
                    raise type(exc)(f"frame {k}: {exc}") from exc
            pose = pose @ est.transform.numpy()
        poses.append(pose)
        smap = integrate_frame(smap, frame, pose, sigma, maps=maps)
    return Trajectory([f.timestamp for f in frames], np.stack(poses)), smap
