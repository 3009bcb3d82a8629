"""Representation-agnostic measurement/map association.

Map elements are world points (surfel centres, say). A frame sees the
elements that project inside its image; each valid pixel is softly
associated with up to ``K_MAX`` nearby elements, weighted by a Gaussian of
the element's distance to the pixel ray and a logistic depth gate. Pixels
whose unnormalised association mass stays below ``NEW_ELEMENT_GATE`` spawn
new elements instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .autodiff import Tensor, as_tensor, segment_sum, sigmoid, where
from .geometry import CameraIntrinsics, RigidTransform, VertexNormalMaps

K_MAX = 4
NEW_ELEMENT_GATE = 0.5
DEPTH_GATE = 0.1  # metres
GATE_STEEPNESS = 50.0
NEIGHBOURHOOD = 1  # pixels searched around an element's projection


def depth_noise_sigma(depth):
    """Falloff width: twice the Kinect-style axial noise ``0.0012 + 0.0019 (d - 0.4)^2``."""
    d = as_tensor(depth)
    return 2.0 * (0.0012 + 0.0019 * (d - 0.4) * (d - 0.4))


@dataclass
class ActiveSet:
    map_indices: np.ndarray  # elements inside the frustum
    points_cam: Tensor  # their camera-frame positions (on the tape)
    uv: np.ndarray  # subpixel projections
    pixel_indices: np.ndarray  # flat ids of valid measurement pixels
    shape: tuple

    @property
    def empty(self) -> bool:
        return self.map_indices.size == 0


def frustum_cull(positions, T_wc, K: CameraIntrinsics, pixel_valid: Optional[np.ndarray] = None) -> ActiveSet:
    """Elements with positive depth projecting inside the image.

    Membership is a hard decision made on forward values; the positions of
    the surviving elements stay on the tape.
    """
    positions = as_tensor(positions)
    if positions.shape[0] == 0:
        raise ValueError("map is empty")
    M = np.linalg.inv(T_wc.numpy() if isinstance(T_wc, RigidTransform) else np.asarray(T_wc, float))
    pc = positions.data @ M[:3, :3].T + M[:3, 3]
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pc[:, 0] / z * K.fx + K.cx
        v = pc[:, 1] / z * K.fy + K.cy
    inside = (z > 1e-6) & (u >= -0.5) & (u < K.width - 0.5) & (v >= -0.5) & (v < K.height - 0.5)
    idx = np.flatnonzero(inside)
    pts = positions[idx] @ Tensor(M[:3, :3]).T + M[:3, 3]
    if pixel_valid is None:
        pixel_valid = np.ones((K.height, K.width), dtype=bool)
    return ActiveSet(idx, pts, np.stack([u[idx], v[idx]], axis=1), np.flatnonzero(pixel_valid.reshape(-1)),
                     (K.height, K.width))


@dataclass
class SoftAssociation:
    pixel: np.ndarray  # flat pixel id per pair
    element: np.ndarray  # map index per pair
    weight: Tensor  # normalised per pixel
    mass: Tensor  # unnormalised mass per flat pixel (H*W)
    new_pixels: np.ndarray  # valid pixels routed to the new-element path
    falloff_sigma: Tensor  # per flat pixel

    def weight_matrix(self, n_pixels: int, n_elements: int) -> np.ndarray:
        W = np.zeros((n_pixels, n_elements))
        np.add.at(W, (self.pixel, self.element), self.weight.data)
        return W


def candidate_pairs(active: ActiveSet, radius: int = NEIGHBOURHOOD):
    """All (pixel, active-slot) pairs with the pixel inside the element's
    ``(2 radius + 1)^2`` projected neighbourhood and valid."""
    H, W = active.shape
    if active.empty:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    cu = np.round(active.uv[:, 0]).astype(np.int64)
    cv = np.round(active.uv[:, 1]).astype(np.int64)
    valid = np.zeros(H * W, dtype=bool)
    valid[active.pixel_indices] = True
    pix, slot = [], []
    slots = np.arange(len(cu))
    for dv in range(-radius, radius + 1):
        for du in range(-radius, radius + 1):
            uu, vv = cu + du, cv + dv
            ok = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
            p = vv[ok] * W + uu[ok]
            keep = valid[p]
            pix.append(p[keep])
            slot.append(slots[ok][keep])
    return np.concatenate(pix), np.concatenate(slot)


def soft_associate(measurement: VertexNormalMaps, active: ActiveSet, K: CameraIntrinsics,
                   sigma: Union[None, float, Tensor] = None, k_max: int = K_MAX) -> SoftAssociation:
    """Associate each valid measurement pixel with nearby active elements.

    The unnormalised weight of a candidate is
    ``exp(-r^2 / 2 sigma^2) * gate(dz)``, where ``r`` is the element's
    distance to the pixel ray and ``dz`` its offset along the ray from the
    measured point. Only the ``k_max`` strongest candidates are kept. If
    ``sigma`` is None it follows :func:`depth_noise_sigma` of the measured
    depth.
    """
    H, W = measurement.shape
    n_pix = H * W
    verts = measurement.vertices.reshape(-1, 3)
    depth = verts[:, 2]
    if sigma is None:
        sig = depth_noise_sigma(where(measurement.valid.reshape(-1), depth, 1.0))
    else:
        sig = as_tensor(sigma)
        if np.any(sig.data <= 0):
            raise ValueError("sigma must be positive")
        sig = sig * np.ones(n_pix) if sig.ndim == 0 else sig
    pix, slot = candidate_pairs(active)
    rays = K.rays().reshape(-1, 3)
    dirs = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    if pix.size:
        q = active.points_cam[slot]
        d = dirs[pix]
        along = (q * d).sum(axis=-1)
        r2 = (q * q).sum(axis=-1) - along * along
        r2 = where(r2.data > 0, r2, 0.0)
        meas_along = (verts[pix] * d).sum(axis=-1)
        dz = (along - meas_along).abs()
        s = sig[pix]
        a = (-(r2) / (2.0 * s * s)).exp() * sigmoid(GATE_STEEPNESS * (1.0 - dz / DEPTH_GATE))
        keep = _top_k(pix, a.data, k_max)
        pix, slot, a = pix[keep], slot[keep], a[keep]
    else:
        a = Tensor(np.zeros(0))
    mass = segment_sum(a, pix, n_pix)
    valid = np.zeros(n_pix, dtype=bool)
    valid[active.pixel_indices] = True
    valid &= measurement.valid.reshape(-1)
    fuse_pix = valid & (mass.data >= NEW_ELEMENT_GATE)
    sel = fuse_pix[pix]
    pix, slot, a = pix[sel], slot[sel], a[sel]
    denom = where(fuse_pix, mass, 1.0)
    weight = a / denom[pix]
    new_pixels = np.flatnonzero(valid & ~fuse_pix)
    return SoftAssociation(pix, active.map_indices[slot], weight, mass, new_pixels, sig)


def _top_k(groups: np.ndarray, values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values within each group (stable)."""
    order = np.lexsort((-values, groups))
    g = groups[order]
    start = np.ones(len(g), dtype=bool)
    start[1:] = g[1:] != g[:-1]
    first_of_group = np.maximum.accumulate(np.where(start, np.arange(len(g)), 0))
    rank = np.arange(len(g)) - first_of_group
    return np.sort(order[rank < k])


def fuse(map_, measurement, association=None, **kw):
    """Dispatch to the representation-specific fusion rule."""
    from .surfels import SurfelMap, surfel_fuse
    from .tsdf import TSDFVolume, tsdf_fuse

    if isinstance(map_, SurfelMap):
        return surfel_fuse(map_, measurement, association, **kw)
    if isinstance(map_, TSDFVolume):
        return tsdf_fuse(map_, measurement)
    raise TypeError(f"no fusion rule for {type(map_).__name__}")
