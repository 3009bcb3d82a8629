"""RGB-D frame container."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .autodiff import Tensor, as_tensor
from .geometry import CameraIntrinsics


@dataclass
class RGBDFrame:
    """Registered colour + depth image pair for one timestamp.

    ``color`` is H x W x 3 in [0, 1]; ``depth`` is H x W in metres. Both may
    be plain arrays or tensors (tensors let gradients reach the pixels).
    """

    color: Tensor
    depth: Tensor
    intrinsics: CameraIntrinsics
    timestamp: float = 0.0
    valid: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.color = as_tensor(self.color)
        self.depth = as_tensor(self.depth)
        d = self.depth.data
        finite = np.isfinite(d) & (d > 0)
        self.valid = finite if self.valid is None else (np.asarray(self.valid, dtype=bool) & finite)
        if d.shape != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(f"depth shape {d.shape} does not match intrinsics "
                             f"{self.intrinsics.height}x{self.intrinsics.width}")
        if self.color.shape[:2] != d.shape:
            raise ValueError("colour and depth sizes differ")

    @property
    def shape(self) -> tuple:
        return self.depth.shape

    def with_depth(self, depth) -> "RGBDFrame":
        return replace(self, depth=as_tensor(depth), valid=None)

    def with_color(self, color) -> "RGBDFrame":
        return replace(self, color=as_tensor(color))

    def intensity(self) -> Tensor:
        c = self.color
        return c[..., 0] * 0.299 + c[..., 1] * 0.587 + c[..., 2] * 0.114
