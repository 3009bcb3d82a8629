"""Gradient analysis and completion-by-descent experiments.

Both experiments map a short sequence with known poses twice, once clean
and once with one frame corrupted, compare the two maps with a scalar loss
and push its gradient back to the corrupted depth image.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import __version__
from .autodiff import Tape, Tensor, backward, concat, no_grad, segment_sum
from .frames import RGBDFrame
from .fusion import NEIGHBOURHOOD, depth_noise_sigma
from .geometry import MAX_DEPTH_JUMP, backproject, backproject_depth
from .metrics import chamfer
from .surfels import SurfelMap, integrate_frame
from .synthetic import Region
from .tsdf import TSDFVolume, integrate

PIPELINES = ("pointfusion", "kinectfusion", "icp-slam")
COLOR_SCALE = 0.1  # metres per unit colour difference in the joint chamfer


class DivergenceError(RuntimeError):
    def __init__(self, msg: str, losses: Sequence[float]):
        super().__init__(msg)
        self.losses = list(losses)


# ---------------------------------------------------------------------------
# mapping with fixed poses


def default_volume(frames: Sequence[RGBDFrame], poses: Sequence[np.ndarray], n: int = 32,
                   margin: float = 0.1) -> TSDFVolume:
    """Cubic volume enclosing every observed point, ``n`` voxels a side."""
    pts = []
    for f, T in zip(frames, poses):
        m = backproject(f)
        p = m.vertices.data[m.valid]
        pts.append(p @ T[:3, :3].T + T[:3, 3])
    pts = np.concatenate(pts)
    lo, hi = pts.min(0) - margin, pts.max(0) + margin
    extent = float((hi - lo).max())
    return TSDFVolume.around((lo + hi) / 2, extent, n)


def build_map(pipeline: str, frames: Sequence[RGBDFrame], poses: Sequence[np.ndarray],
              volume: Optional[TSDFVolume] = None, max_jump: Optional[float] = MAX_DEPTH_JUMP):
    """Fuse ``frames`` at the given world poses; gradients reach any tensor inputs.

    ``max_jump=None`` keeps pixels next to depth discontinuities.
    """
    maps = [backproject_depth(f.depth, f.intrinsics, f.valid, max_jump) for f in frames]
    if pipeline == "pointfusion":
        smap = SurfelMap()
        for f, T, m in zip(frames, poses, maps):
            smap = integrate_frame(smap, f, T, maps=m)
        return smap
    if pipeline == "kinectfusion":
        if volume is None:
            raise ValueError("kinectfusion needs a volume")
        for f, T, m in zip(frames, poses, maps):
            volume = integrate(volume, f, T, m)
        return volume
    if pipeline == "icp-slam":
        parts = []
        for T, m in zip(poses, maps):
            v = m.vertices.reshape(-1, 3)[np.flatnonzero(m.valid.reshape(-1))]
            parts.append(v @ Tensor(T[:3, :3]).T + T[:3, 3])
        return concat(parts)
    raise ValueError(f"unknown pipeline {pipeline!r}; choose from {PIPELINES}")


def _points(map_) -> Tensor:
    return map_.positions if isinstance(map_, SurfelMap) else map_


def map_loss(perturbed, clean, with_color: bool = False, reduction: str = "mean") -> Tensor:
    """Chamfer distance between point maps or mean squared TSDF difference
    over voxels observed in either volume."""
    if isinstance(perturbed, TSDFVolume):
        seen = (perturbed.weight.data > 1e-3) | (clean.weight.data > 1e-3)
        if not seen.any():
            return Tensor(np.zeros(()))
        d = (perturbed.tsdf - clean.tsdf.data)[seen]
        return (d * d).mean() if reduction == "mean" else (d * d).sum()
    a, b = _points(perturbed), _points(clean)
    if with_color and isinstance(perturbed, SurfelMap):
        a = concat([a, perturbed.colors * COLOR_SCALE], axis=1)
        b = concat([b, clean.colors * COLOR_SCALE], axis=1)
    return chamfer(a, b.data, reduction=reduction)


def falloff_radius_px(frame: RGBDFrame, region: Optional[Region] = None, clean: Optional[RGBDFrame] = None) -> int:
    """Pixel reach of one association: the candidate window plus three
    falloff widths projected at the least favourable valid depth of
    ``region`` (whole image if None), in ``frame`` and optionally ``clean``."""
    sel = np.ones(frame.shape, bool) if region is None else region.mask(frame.shape)
    d = frame.depth.data[frame.valid & sel]
    if clean is not None:
        d = np.concatenate([d, clean.depth.data[clean.valid & sel]])
    if d.size == 0:
        return NEIGHBOURHOOD
    reach = 3.0 * np.asarray(depth_noise_sigma(d).data) * frame.intrinsics.fx / d
    return NEIGHBOURHOOD + int(math.ceil(float(reach.max())))


# ---------------------------------------------------------------------------
# gradient analysis


@dataclass
class GradientReport:
    magnitude: np.ndarray  # H x W, |dL/d depth|
    loss: float
    region_fraction: float  # gradient mass inside the dilated region
    dilation_px: int
    top_fractions: dict = field(default_factory=dict)  # share of mass in the top p% pixels

    @property
    def total_mass(self) -> float:
        return float(self.magnitude.sum())

    def summary(self) -> dict:
        return dict(loss=self.loss, total_mass=self.total_mass, region_fraction=self.region_fraction,
                    dilation_px=self.dilation_px, top_fractions=self.top_fractions)


def _top_fractions(mag: np.ndarray, percents=(1, 5, 10)) -> dict:
    flat = np.sort(mag.reshape(-1))[::-1]
    total = flat.sum()
    out = {}
    for p in percents:
        n = max(1, int(round(len(flat) * p / 100)))
        out[f"top{p}pct"] = float(flat[:n].sum() / total) if total > 0 else 0.0
    return out


def gradient_analysis(frames: Sequence[RGBDFrame], poses: Sequence[np.ndarray], perturbed: RGBDFrame,
                      index: int = -1, region: Optional[Region] = None, pipeline: str = "pointfusion",
                      volume: Optional[TSDFVolume] = None) -> GradientReport:
    """Per-pixel gradient of the map discrepancy w.r.t. the corrupted depth.

    ``frames`` is the clean sequence; frame ``index`` is replaced by
    ``perturbed``. The clean map is detached, so the loss is zero (and its
    gradient vanishes) when nothing was corrupted.
    """
    frames = list(frames)
    index = index % len(frames)
    if pipeline == "kinectfusion" and volume is None:
        volume = default_volume(frames, poses)
    with no_grad():
        clean = build_map(pipeline, frames, poses, volume)
    depth = Tensor(perturbed.depth.data.copy(), requires_grad=True)
    seq = frames[:index] + [perturbed.with_depth(depth)] + frames[index + 1 :]
    with Tape() as tape:
        pert = build_map(pipeline, seq, poses, volume)
        loss = map_loss(pert, clean)
        backward(loss, tape)
    mag = np.abs(depth.grad) if depth.grad is not None else np.zeros(depth.shape)
    r = falloff_radius_px(perturbed, region, frames[index])
    total = mag.sum()
    frac = float(mag[region.dilated(r, mag.shape)].sum() / total) if (region is not None and total > 0) else 0.0
    return GradientReport(mag, float(loss.data), frac, r, _top_fractions(mag))


# ---------------------------------------------------------------------------
# completion by descent


@dataclass
class CompletionResult:
    frame: RGBDFrame
    losses: list
    depth_rmse: Optional[float] = None  # against the clean frame inside the region

    def summary(self) -> dict:
        return dict(initial_loss=self.losses[0], final_loss=self.losses[-1], steps=len(self.losses) - 1,
                    reduction=1.0 - self.losses[-1] / self.losses[0] if self.losses[0] > 0 else 0.0,
                    depth_rmse=self.depth_rmse)


def completion_by_descent(frames: Sequence[RGBDFrame], poses: Sequence[np.ndarray], perturbed: RGBDFrame,
                          region: Region, index: int = -1, steps: int = 100, lr: float = 0.2,
                          pipeline: str = "pointfusion", optimize_color: bool = False,
                          optimize_all: bool = False, volume: Optional[TSDFVolume] = None,
                          max_jump: Optional[float] = None, callback=None) -> CompletionResult:
    """Recover the corrupted region by gradient descent on the map discrepancy.

    The chamfer objective is summed over points (not averaged) so that
    ``lr`` is a per-pixel step size independent of the image resolution.
    Only pixels inside ``region`` move unless ``optimize_all``. The run
    aborts with :class:`DivergenceError` once the loss exceeds ten times its
    initial value.

    Discontinuity rejection is off by default here: the region's rim sits
    on a depth jump at the start, and invalid pixels receive no gradient,
    so rejecting them would freeze the rim at its corrupted depth.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    frames = list(frames)
    index = index % len(frames)
    if pipeline == "kinectfusion" and volume is None:
        volume = default_volume(frames, poses)
    H, W = perturbed.shape
    mask = np.ones((H, W), bool) if optimize_all else region.mask((H, W))
    ids = np.flatnonzero(mask.reshape(-1))
    depth0 = perturbed.depth.data.copy()
    color0 = perturbed.color.data.copy()
    var_d = depth0.reshape(-1)[ids].copy()
    var_c = color0.reshape(-1, 3)[ids].copy()
    with no_grad():
        clean = build_map(pipeline, frames, poses, volume, max_jump)

    def run(td: Tensor, tc: Tensor) -> Tensor:
        depth = segment_sum(td, ids, H * W).reshape(H, W) + depth0 * ~mask
        color = segment_sum(tc, ids, H * W).reshape(H, W, 3) + color0 * ~mask[..., None]
        frame = RGBDFrame(color, depth, perturbed.intrinsics, perturbed.timestamp)
        seq = frames[:index] + [frame] + frames[index + 1 :]
        return _objective(build_map(pipeline, seq, poses, volume, max_jump), clean, optimize_color)

    def objective(vd: np.ndarray, vc: np.ndarray, grad: bool):
        if not grad:
            with no_grad():
                return float(run(Tensor(vd), Tensor(vc)).data), None, None
        td = Tensor(vd, requires_grad=True)
        tc = Tensor(vc, requires_grad=optimize_color)
        with Tape() as tape:
            loss = run(td, tc)
            backward(loss, tape)
        gd = td.grad if td.grad is not None else np.zeros_like(vd)
        gc = tc.grad if tc.grad is not None else np.zeros_like(vc)
        return float(loss.data), gd, gc

    losses = []
    for _ in range(steps):
        loss, gd, gc = objective(var_d, var_c, True)
        losses.append(loss)
        if callback is not None:
            callback(len(losses) - 1, loss)
        if not np.isfinite(loss) or loss > 10 * losses[0]:
            raise DivergenceError(f"loss {loss:.4g} exceeded 10x the initial {losses[0]:.4g}", losses)
        var_d = var_d - lr * gd
        if optimize_color:
            var_c = np.clip(var_c - lr * gc, 0.0, 1.0)
    final, _, _ = objective(var_d, var_c, False)
    losses.append(final)
    if not np.isfinite(final) or final > 10 * losses[0]:
        raise DivergenceError(f"loss {final:.4g} exceeded 10x the initial {losses[0]:.4g}", losses)
    depth = depth0.copy()
    depth.reshape(-1)[ids] = var_d
    color = color0.copy()
    color.reshape(-1, 3)[ids] = var_c
    out = RGBDFrame(color, depth, perturbed.intrinsics, perturbed.timestamp)
    truth = frames[index].depth.data
    rm = region.mask((H, W)) & frames[index].valid
    rmse = float(np.sqrt(np.mean((depth[rm] - truth[rm]) ** 2))) if rm.any() else None
    return CompletionResult(out, losses, rmse)


def _objective(map_, clean, with_color: bool) -> Tensor:
    return map_loss(map_, clean, with_color, reduction="sum")


# ---------------------------------------------------------------------------
# outputs


def write_heatmap(magnitude: np.ndarray, path) -> None:
    """Black-red-yellow-white ramp of ``magnitude`` normalised to its maximum."""
    m = np.asarray(magnitude, float)
    peak = m.max()
    t = m / peak if peak > 0 else np.zeros_like(m)
    rgb = np.stack([np.clip(3 * t, 0, 1), np.clip(3 * t - 1, 0, 1), np.clip(3 * t - 2, 0, 1)], axis=-1)
    Image.fromarray((rgb * 255).round().astype(np.uint8)).save(path)


def write_loss_curve(losses: Sequence[float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def read_loss_curve(path) -> list[float]:
    with open(path, newline="") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


def write_manifest(path, config: dict, metrics: dict, seed: int) -> None:
    doc = dict(version=__version__, seed=int(seed), config=config, metrics=metrics)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
