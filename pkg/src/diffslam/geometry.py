"""Lie-group utilities, pinhole camera model, vertex and normal maps.

Conventions: twists are ordered ``(omega, v)``; camera frames are x right,
y down, z forward; a pose ``T_wc`` maps camera coordinates to world
coordinates. Everything here is built from :mod:`diffslam.autodiff`
operations and is differentiable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor, as_tensor, concat, cross, norm, stack, where

SMALL_ANGLE = 1e-6
MAX_DEPTH_JUMP = 0.05  # relative; larger neighbour jumps mark a silhouette
_SERIES_ANGLE = 1e-2


class SingularityError(ValueError):
    """Logarithm requested too close to a rotation by pi."""


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
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics of an image resized by ``factor`` (pixel-centre aligned)."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        cx = (self.cx + 0.5) * factor - 0.5
        cy = (self.cy + 0.5) * factor - 0.5
        return CameraIntrinsics(self.fx * factor, self.fy * factor, min(max(cx, 0.0), w - 1e-6),
                                min(max(cy, 0.0), h - 1e-6), w, h)

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return u.astype(float), v.astype(float)

    def rays(self) -> np.ndarray:
        """H x W x 3 camera rays with unit z component."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def load_intrinsics(path) -> tuple[CameraIntrinsics, float]:
    """Read a sidecar with ``fx fy cx cy width height depth_scale``.

    Accepts JSON (an object with those keys) or whitespace-separated text.
    Returns the intrinsics and the depth scale (metres per stored unit).
    """
    text = Path(path).read_text().strip()
    if text.startswith("{"):
        d = json.loads(text)
        vals = [d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"], d.get("depth_scale", 1.0)]
    else:
        vals = [float(t) for t in text.split()]
        if len(vals) != 7:
            raise ValueError(f"{path}: expected 7 numbers, got {len(vals)}")
    K = CameraIntrinsics(float(vals[0]), float(vals[1]), float(vals[2]), float(vals[3]), int(vals[4]), int(vals[5]))
    return K, float(vals[6])


# ---------------------------------------------------------------------------
# so(3) / SE(3)


def hat(omega) -> Tensor:
    """3-vector to skew-symmetric 3 x 3 matrix."""
    w = as_tensor(omega)
    z = Tensor(0.0)
    return stack(
        [
            stack([z, -w[2], w[1]]),
            stack([w[2], z, -w[0]]),
            stack([-w[1], w[0], z]),
        ]
    )


def _rotation_coeffs(omega: Tensor):
    """Return (theta^2, theta, A, B, C) for the Rodrigues-type series.

    A = sin t / t, B = (1 - cos t) / t^2, C = (t - sin t) / t^3.
    """
    th2 = (omega * omega).sum()
    t2 = float(th2.data)
    if t2 < SMALL_ANGLE**2:
        A = 1.0 - th2 / 6.0
        B = 0.5 - th2 / 24.0
        C = 1.0 / 6.0 - th2 / 120.0
        return th2, None, A, B, C
    th = th2.sqrt()
    A = th.sin() / th
    half = (th * 0.5).sin()
    B = 2.0 * half * half / th2
    if t2 < _SERIES_ANGLE**2:
        C = 1.0 / 6.0 - th2 / 120.0 + th2 * th2 / 5040.0
    else:
        C = (th - th.sin()) / (th2 * th)
    return th2, th, A, B, C


def so3_exp(omega) -> Tensor:
    """Rotation matrix exp([omega]x) via Rodrigues' formula."""
    omega = as_tensor(omega)
    _, _, A, B, _ = _rotation_coeffs(omega)
    W = hat(omega)
    return Tensor(np.eye(3)) + A * W + B * (W @ W)


def se3_exp(twist) -> "RigidTransform":
    """Exponential map of a twist ``(omega, v)`` to a rigid transform."""
    twist = as_tensor(twist)
    omega, v = twist[:3], twist[3:]
    _, _, A, B, C = _rotation_coeffs(omega)
    W = hat(omega)
    W2 = W @ W
    eye = Tensor(np.eye(3))
    R = eye + A * W + B * W2
    V = eye + B * W + C * W2
    t = V @ v
    return RigidTransform.from_rt(R, t)


def so3_log(R) -> Tensor:
    """Rotation vector of a rotation matrix (angle < pi - 1e-6)."""
    R = as_tensor(R)
    Rd = R.data
    cos_t = np.clip((np.trace(Rd) - 1.0) / 2.0, -1.0, 1.0)
    skew = stack([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) * 0.5  # sin(t) * axis
    sin_t = float(np.linalg.norm(skew.data))
    theta = float(np.arctan2(sin_t, cos_t))
    if theta > np.pi - SMALL_ANGLE:
        raise SingularityError(f"rotation angle {theta:.9f} too close to pi for a unique logarithm")
    if theta < _SERIES_ANGLE:
        # theta / sin(theta) as a series in s2 = sin(theta)^2
        s2 = (skew * skew).sum()
        return skew * (1.0 + s2 / 6.0 + 3.0 * s2 * s2 / 40.0)
    if theta < np.pi - 0.1:
        sin_tt = norm(skew)
        cos_tt = (R[0, 0] + R[1, 1] + R[2, 2] - 1.0) * 0.5
        th = _atan2(sin_tt, cos_tt)
        return skew * (th / sin_tt)
    # near pi: axis from the symmetric part, sign from the skew part
    cos_tt = (R[0, 0] + R[1, 1] + R[2, 2] - 1.0) * 0.5
    S = (R + R.T) * 0.5 - cos_tt * Tensor(np.eye(3))  # (1 - cos) a a^T
    k = int(np.argmax(np.diag(S.data)))
    col = S[:, k] / (S[k, k] * (1.0 - cos_tt)).sqrt()
    if float(col.data @ skew.data) < 0:
        col = -col
    axis = col / norm(col)
    sin_tt = (skew * axis).sum()
    th = _atan2(sin_tt, cos_tt)
    return axis * th


def _atan2(y: Tensor, x: Tensor) -> Tensor:
    """Differentiable atan2 for y >= 0 (angles in [0, pi])."""
    from .autodiff import record

    yv, xv = float(y.data), float(x.data)
    val = np.arctan2(yv, xv)
    r2 = xv * xv + yv * yv
    return record(np.asarray(val), (y, x), lambda g: (g * xv / r2, -g * yv / r2))


def se3_log(T: "RigidTransform") -> Tensor:
    """Twist ``(omega, v)`` with ``se3_exp(twist) == T``."""
    R, t = T.rotation, T.translation
    omega = so3_log(R)
    th2 = (omega * omega).sum()
    t2 = float(th2.data)
    W = hat(omega)
    eye = Tensor(np.eye(3))
    if t2 < _SERIES_ANGLE**2:
        coef = 1.0 / 12.0 + th2 / 720.0 + th2 * th2 / 30240.0
    else:
        th = th2.sqrt()
        half = th * 0.5
        # (1 - (t/2) cot(t/2)) / t^2
        coef = (1.0 - half * half.cos() / half.sin()) / th2
    Vinv = eye - 0.5 * W + coef * (W @ W)
    return concat([omega, Vinv @ t])


class RigidTransform:
    """4 x 4 homogeneous rigid transform backed by a :class:`Tensor`."""

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        self.matrix = as_tensor(matrix)
        if self.matrix.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {self.matrix.shape}")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, R, t) -> "RigidTransform":
        R, t = as_tensor(R), as_tensor(t)
        top = concat([R, t.reshape(3, 1)], axis=1)
        return cls(concat([top, Tensor([[0.0, 0.0, 0.0, 1.0]])], axis=0))

    @classmethod
    def from_twist(cls, twist) -> "RigidTransform":
        return se3_exp(twist)

    @property
    def rotation(self) -> Tensor:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> Tensor:
        return self.matrix[:3, 3]

    def numpy(self) -> np.ndarray:
        return self.matrix.data

    def log(self) -> Tensor:
        return se3_log(self)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform.from_rt(Rt, -(Rt @ self.translation))

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.matrix @ other.matrix)

    def apply(self, points) -> Tensor:
        """Transform N x 3 (or ... x 3) points."""
        points = as_tensor(points)
        return points @ self.rotation.T + self.translation

    def rotate(self, vectors) -> Tensor:
        return as_tensor(vectors) @ self.rotation.T

    def detach(self) -> "RigidTransform":
        return RigidTransform(self.matrix.data.copy())

    def is_valid(self, tol: float = 1e-9) -> bool:
        M = self.matrix.data
        R = M[:3, :3]
        return (
            np.allclose(R @ R.T, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol
            and np.allclose(M[3], [0, 0, 0, 1], atol=0)
        )

    def __repr__(self) -> str:
        return f"RigidTransform({np.array2string(self.matrix.data, precision=5)})"


# ---------------------------------------------------------------------------
# vertex and normal maps


@dataclass
class VertexNormalMaps:
    vertices: Tensor  # H x W x 3, camera frame
    normals: Tensor  # H x W x 3, unit, facing the camera
    valid: np.ndarray  # H x W bool

    @property
    def shape(self) -> tuple:
        return self.valid.shape

    def transformed(self, T: RigidTransform) -> "VertexNormalMaps":
        return VertexNormalMaps(T.apply(self.vertices), T.rotate(self.normals), self.valid)


def backproject_depth(depth, K: CameraIntrinsics, valid: Optional[np.ndarray] = None,
                      max_jump: float = MAX_DEPTH_JUMP) -> VertexNormalMaps:
    """Vertex map ``depth * K^-1 (u, v, 1)`` and central-difference normals.

    Pixels with nonpositive depth, on the image border, with an invalid
    4-neighbour, or next to a depth jump larger than ``max_jump * depth``
    are marked invalid; their values are zeroed.
    """
    depth = as_tensor(depth)
    d = depth.data
    ok = np.isfinite(d) & (d > 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    rays = Tensor(K.rays())
    dz = where(ok, depth, 0.0)
    verts = rays * dz.reshape(K.height, K.width, 1)
    H, W = ok.shape
    nvalid = np.zeros_like(ok)
    nvalid[1:-1, 1:-1] = ok[1:-1, 1:-1] & ok[1:-1, 2:] & ok[1:-1, :-2] & ok[2:, 1:-1] & ok[:-2, 1:-1]
    if max_jump is not None:
        c = d[1:-1, 1:-1]
        jump = np.zeros_like(c)
        for nb in (d[1:-1, 2:], d[1:-1, :-2], d[2:, 1:-1], d[:-2, 1:-1]):
            jump = np.maximum(jump, np.abs(np.nan_to_num(nb) - np.nan_to_num(c)))
        nvalid[1:-1, 1:-1] &= jump <= max_jump * np.nan_to_num(c)
    dx = verts[1:-1, 2:] - verts[1:-1, :-2]
    dy = verts[2:, 1:-1] - verts[:-2, 1:-1]
    n = cross(dy, dx)
    inner = nvalid[1:-1, 1:-1]
    # swap in a unit vector where invalid so the norm's backward stays finite
    n = where(inner[..., None], n, np.array([0.0, 0.0, -1.0]))
    n = where(inner[..., None], n / norm(n, axis=-1, keepdims=True), 0.0)
    # pad back to H x W with zeros on the border
    zrow = Tensor(np.zeros((1, W - 2, 3)))
    n = concat([zrow, n, zrow], axis=0)
    zcol = Tensor(np.zeros((H, 1, 3)))
    n = concat([zcol, n, zcol], axis=1)
    verts = where(nvalid[..., None], verts, 0.0)
    return VertexNormalMaps(verts, n, nvalid)


def backproject(frame, K: Optional[CameraIntrinsics] = None) -> VertexNormalMaps:
    """Vertex/normal maps of an :class:`~diffslam.frames.RGBDFrame`."""
    return backproject_depth(frame.depth, K or frame.intrinsics, frame.valid)


def project(points_cam, K: CameraIntrinsics, min_depth: float = 1e-6):
    """Pinhole projection of camera-frame points (no rounding)."""
    p = as_tensor(points_cam)
    z = p[:, 2]
    ok = z.data > min_depth
    zs = where(ok, z, 1.0)
    u = p[:, 0] / zs * K.fx + K.cx
    v = p[:, 1] / zs * K.fy + K.cy
    return stack([u, v], axis=1), z, ok


def transform_project(points, T_cw: RigidTransform, K: CameraIntrinsics):
    """Map world points into the camera given by ``T_cw`` and project them.

    Returns ``(uv, depth, valid)``: subpixel N x 2 coordinates, N depths and
    a mask that is false for points at or behind ``z = 1e-6``.
    """
    return project(T_cw.apply(points), K)
