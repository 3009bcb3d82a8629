"""Analytic RGB-D scenes used as ground-truth oracles.

Scenes are built from spheres, infinite planes and axis-aligned boxes.
Depth is the exact ray/primitive intersection; colour is Lambertian shading
of a smooth solid texture, so it does not depend on the viewpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .frames import RGBDFrame
from .geometry import CameraIntrinsics

OCCLUDER_DEPTH = 0.5


@dataclass
class Sphere:
    center: Sequence[float]
    radius: float
    albedo: Sequence[float] = (0.8, 0.7, 0.6)

    def intersect(self, o, d):
        c = np.asarray(self.center, float)
        oc = o - c
        a = np.einsum("...i,...i", d, d)
        b = 2 * np.einsum("...i,...i", d, oc)
        cc = oc @ oc - self.radius**2
        disc = b * b - 4 * a * cc
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 1e-9, t0, t1)
        t = np.where(ok & (t > 1e-9), t, np.inf)
        hit = o + t[..., None] * d
        n = (hit - c) / self.radius
        return t, n

    def contains(self, p) -> bool:
        return np.linalg.norm(np.asarray(p) - np.asarray(self.center)) < self.radius

    def distance(self, p):
        return np.abs(np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius)


@dataclass
class Plane:
    point: Sequence[float]
    normal: Sequence[float]
    albedo: Sequence[float] = (0.6, 0.7, 0.8)

    def intersect(self, o, d):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(self.point, float) - o) @ n) / denom
        t = np.where(np.isfinite(t) & (t > 1e-9), t, np.inf)
        return t, np.broadcast_to(n, d.shape)

    def contains(self, p) -> bool:
        return False

    def distance(self, p):
        n = np.asarray(self.normal, float)
        n = n / np.linalg.norm(n)
        return np.abs((p - np.asarray(self.point, float)) @ n)


@dataclass
class Box:
    center: Sequence[float]
    half_extents: Sequence[float]
    albedo: Sequence[float] = (0.5, 0.8, 0.5)

    def intersect(self, o, d):
        c = np.asarray(self.center, float)
        h = np.asarray(self.half_extents, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (c - h - o) * inv
            tb = (c + h - o) * inv
        tmin = np.nanmax(np.minimum(ta, tb), axis=-1)
        tmax = np.nanmin(np.maximum(ta, tb), axis=-1)
        ok = (tmax >= tmin) & (tmin > 1e-9)
        t = np.where(ok, tmin, np.inf)
        hit = o + np.where(ok, t, 0)[..., None] * d
        q = (hit - c) / h
        axis = np.argmax(np.abs(q), axis=-1)
        n = np.zeros(d.shape)
        np.put_along_axis(n, axis[..., None], np.sign(np.take_along_axis(q, axis[..., None], -1)), -1)
        return t, n

    def contains(self, p) -> bool:
        return bool(np.all(np.abs(np.asarray(p) - np.asarray(self.center)) < np.asarray(self.half_extents)))

    def distance(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0)
        return np.abs(outside + inside)


Primitive = Union[Sphere, Plane, Box]


@dataclass
class NoiseModel:
    """Depth noise ``sigma(d) = scale * (a + b (d - c)^2)`` metres."""

    scale: float = 0.0
    a: float = 0.0012
    b: float = 0.0019
    c: float = 0.4

    def sigma(self, depth):
        return self.scale * (self.a + self.b * (np.asarray(depth) - self.c) ** 2)


@dataclass
class SyntheticScene:
    primitives: list
    poses: list  # camera-to-world 4 x 4
    intrinsics: CameraIntrinsics
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0
    texture_frequency: float = 6.0
    light_direction: Sequence[float] = (0.3, -0.5, -0.8)
    frame_interval: float = 1.0 / 30.0
    max_range: float = 8.0  # sensor range; farther hits read as missing depth
    volume_hint: Optional[tuple] = None  # (centre, extent) suggested for a TSDF volume

    def __post_init__(self):
        self.poses = [np.asarray(p, float) for p in self.poses]
        for i, T in enumerate(self.poses):
            for prim in self.primitives:
                if prim.contains(T[:3, 3]):
                    raise ValueError(f"camera {i} lies inside {type(prim).__name__}")

    def __len__(self) -> int:
        return len(self.poses)

    def timestamp(self, index: int) -> float:
        return round(index * self.frame_interval, 6)

    def nearest_primitive(self, points) -> np.ndarray:
        d = np.stack([p.distance(points) for p in self.primitives], axis=-1)
        return np.argmin(d, axis=-1)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from ``eye`` to ``target`` (x right, y down)."""
    eye, target, up = (np.asarray(v, float) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    T = np.eye(4)
    T[:3, :3] = np.stack([x, y, z], axis=1)
    T[:3, 3] = eye
    return T


def render_synthetic(scene: SyntheticScene, frame_index: int) -> tuple[RGBDFrame, np.ndarray]:
    """Render frame ``frame_index``; returns the frame and its ground-truth pose."""
    if not 0 <= frame_index < len(scene.poses):
        raise IndexError(f"frame index {frame_index} outside trajectory of {len(scene.poses)}")
    K = scene.intrinsics
    T = scene.poses[frame_index]
    rays_c = K.rays()
    d = rays_c @ T[:3, :3].T
    o = T[:3, 3]
    best_t = np.full(d.shape[:2], np.inf)
    best_n = np.zeros(d.shape)
    best_i = np.full(d.shape[:2], -1)
    for i, prim in enumerate(scene.primitives):
        t, n = prim.intersect(o, d)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[..., None], n, best_n)
        best_i = np.where(closer, i, best_i)
    hit = np.isfinite(best_t) & (best_t <= scene.max_range)
    depth = np.where(hit, best_t, 0.0)  # rays have unit z, so t is the z-depth
    # face normals toward the camera for shading
    flip = np.einsum("...i,...i", best_n, d) > 0
    n = np.where(flip[..., None], -best_n, best_n)
    pts = o + depth[..., None] * d
    albedo = np.zeros(d.shape)
    for i, prim in enumerate(scene.primitives):
        albedo[best_i == i] = prim.albedo
    f = scene.texture_frequency
    tex = 0.55 + (np.sin(f * pts[..., 0]) + np.sin(f * pts[..., 1] + 1.3) + np.sin(f * pts[..., 2] + 2.1)) / 7.0
    light = -np.asarray(scene.light_direction, float)
    light /= np.linalg.norm(light)
    shade = 0.35 + 0.65 * np.clip(np.abs(n @ light), 0, 1)
    color = np.clip(albedo * (tex * shade)[..., None], 0, 1)
    color[~hit] = 0.0
    if scene.noise.scale > 0:
        rng = np.random.default_rng([scene.seed, frame_index])
        depth = np.where(hit, depth + rng.normal(size=depth.shape) * scene.noise.sigma(depth), 0.0)
        depth = np.where(depth > 0, depth, 0.0)
    frame = RGBDFrame(color=color, depth=depth, intrinsics=K, timestamp=scene.timestamp(frame_index))
    return frame, T.copy()


# ---------------------------------------------------------------------------
# presets


def default_intrinsics(width: int = 80, height: int = 60, fov_deg: float = 60.0) -> CameraIntrinsics:
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    return CameraIntrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def sphere_scene(n_frames: int = 20, arc_deg: float = 20.0, radius: float = 3.0, height: float = 0.8,
                 intrinsics: Optional[CameraIntrinsics] = None, noise: float = 0.0, seed: int = 0) -> SyntheticScene:
    """Unit sphere at the origin on a floor, with a box for rotational anchoring,
    observed from an arc of an orbit."""
    az = np.deg2rad(np.linspace(-arc_deg / 2, arc_deg / 2, n_frames))
    poses = [look_at((radius * np.cos(a), radius * np.sin(a), height), (0, 0, 0)) for a in az]
    prims = [
        Sphere((0.0, 0.0, 0.0), 1.0),
        Plane((0.0, 0.0, -1.0), (0.0, 0.0, 1.0)),
        Box((0.3, -1.15, -0.7), (0.3, 0.25, 0.3)),
        Box((-0.6, 1.1, -0.8), (0.25, 0.3, 0.2), albedo=(0.8, 0.5, 0.4)),
    ]
    return SyntheticScene(prims, poses, intrinsics or default_intrinsics(), NoiseModel(scale=noise), seed,
                          volume_hint=((0.0, 0.0, 0.0), 3.2))


def plane_scene(n_frames: int = 3, depth: float = 1.5, step: float = 0.05,
                intrinsics: Optional[CameraIntrinsics] = None, noise: float = 0.0, seed: int = 0,
                motion: str = "lateral") -> SyntheticScene:
    """Fronto-parallel textured plane; camera translates laterally or dollies."""
    poses = []
    for k in range(n_frames):
        T = np.eye(4)
        if motion == "lateral":
            T[:3, 3] = (k * step, 0.0, 0.0)
        elif motion == "dolly":
            T[:3, 3] = (0.0, 0.0, k * step)
        else:
            raise ValueError(f"unknown motion {motion!r}")
        poses.append(T)
    prims = [Plane((0.0, 0.0, depth), (0.0, 0.0, -1.0), albedo=(0.9, 0.9, 0.9))]
    return SyntheticScene(prims, poses, intrinsics or default_intrinsics(), NoiseModel(scale=noise), seed,
                          texture_frequency=12.0, volume_hint=((0.0, 0.0, depth), 2.4))


def corner_scene(n_frames: int = 2, intrinsics: Optional[CameraIntrinsics] = None, noise: float = 0.0,
                 seed: int = 0) -> SyntheticScene:
    """Inside of a corner formed by three orthogonal planes, seen diagonally."""
    eye = np.array([-0.2, -0.2, -0.2])
    poses = [look_at(eye, (1.0, 1.0, 1.0), up=(0.0, 0.0, -1.0))] * n_frames
    prims = [
        Plane((1.0, 0.0, 0.0), (-1.0, 0.0, 0.0), albedo=(0.9, 0.6, 0.6)),
        Plane((0.0, 1.0, 0.0), (0.0, -1.0, 0.0), albedo=(0.6, 0.9, 0.6)),
        Plane((0.0, 0.0, 1.0), (0.0, 0.0, -1.0), albedo=(0.6, 0.6, 0.9)),
    ]
    return SyntheticScene(prims, poses, intrinsics or default_intrinsics(), NoiseModel(scale=noise), seed,
                          volume_hint=((0.5, 0.5, 0.5), 1.4))


PRESETS = {"sphere": sphere_scene, "plane": plane_scene, "corner": corner_scene}


def make_scene(name: str, **kwargs) -> SyntheticScene:
    try:
        return PRESETS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown synthetic scene {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# scene config files


def scene_from_config(cfg: dict) -> SyntheticScene:
    """Build a scene from a JSON-style dict.

    Either ``{"preset": name, ...preset kwargs}`` or an explicit description
    with ``primitives`` (each ``{"type": "sphere"|"plane"|"box", ...}``),
    ``poses`` (4 x 4 lists), ``intrinsics`` and optional ``noise``.
    """
    cfg = dict(cfg)
    if "preset" in cfg:
        name = cfg.pop("preset")
        if "intrinsics" in cfg:
            cfg["intrinsics"] = CameraIntrinsics(**cfg["intrinsics"])
        return make_scene(name, **cfg)
    kinds = {"sphere": Sphere, "plane": Plane, "box": Box}
    prims = []
    for p in cfg["primitives"]:
        p = dict(p)
        prims.append(kinds[p.pop("type")](**p))
    K = CameraIntrinsics(**cfg["intrinsics"])
    noise = NoiseModel(**cfg.get("noise", {}))
    extra = {k: cfg[k] for k in ("seed", "texture_frequency", "light_direction", "frame_interval", "max_range", "volume_hint") if k in cfg}
    return SyntheticScene(prims, cfg["poses"], K, noise, **extra)


def load_scene_config(path) -> SyntheticScene:
    return scene_from_config(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# perturbations


@dataclass(frozen=True)
class Region:
    top: int
    left: int
    height: int
    width: int

    @classmethod
    def centered(cls, shape, size: int = 40) -> "Region":
        H, W = shape
        return cls((H - size) // 2, (W - size) // 2, size, size)

    @property
    def slices(self) -> tuple:
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)

    def mask(self, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.slices] = True
        return m

    def dilated(self, r: int, shape) -> np.ndarray:
        H, W = shape
        m = np.zeros(shape, dtype=bool)
        m[max(0, self.top - r) : min(H, self.top + self.height + r),
          max(0, self.left - r) : min(W, self.left + self.width + r)] = True
        return m


def apply_perturbation(frame: RGBDFrame, kind: str, region: Region, seed: int = 0,
                       noise_std: float = 0.02, occluder_depth: float = OCCLUDER_DEPTH) -> RGBDFrame:
    """Return a copy of ``frame`` with ``region`` corrupted.

    ``occluder`` sets the region's depth to a constant near plane;
    ``pixel-noise`` adds seeded Gaussian noise to depth; ``uniform-noise``
    replaces depth (within the frame's valid depth range) and colour with
    seeded uniform values.
    """
    H, W = frame.shape
    if (region.top < 0 or region.left < 0 or region.height < 0 or region.width < 0
            or region.top + region.height > H or region.left + region.width > W):
        raise ValueError(f"region {region} outside {H}x{W} image")
    depth = frame.depth.data.copy()
    color = frame.color.data.copy()
    sl = region.slices
    rng = np.random.default_rng(seed)
    if kind == "occluder":
        depth[sl] = occluder_depth
    elif kind == "pixel-noise":
        depth[sl] = depth[sl] + rng.normal(scale=noise_std, size=depth[sl].shape)
    elif kind == "uniform-noise":
        valid = frame.depth.data[frame.valid]
        lo, hi = (float(valid.min()), float(valid.max())) if valid.size else (0.5, 5.0)
        depth[sl] = rng.uniform(lo, hi, size=depth[sl].shape)
        color[sl] = rng.uniform(0.0, 1.0, size=color[sl].shape)
    else:
        raise ValueError(f"unknown perturbation {kind!r}")
    return RGBDFrame(color=color, depth=depth, intrinsics=frame.intrinsics, timestamp=frame.timestamp)
