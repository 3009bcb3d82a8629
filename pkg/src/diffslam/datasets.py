"""Sequence loaders (TUM RGB-D, ICL-NUIM, ScanNet-style, synthetic) and
trajectory / PNG I/O."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .frames import RGBDFrame
from .geometry import CameraIntrinsics, load_intrinsics
from .synthetic import SyntheticScene, load_scene_config, make_scene, render_synthetic

TUM_DEPTH_SCALE = 1.0 / 5000.0
MAX_TIME_GAP = 0.02
ICL_NUIM_INTRINSICS = CameraIntrinsics(481.20, 480.0, 319.5, 239.5, 640, 480)
TUM_INTRINSICS = {
    "freiburg1": CameraIntrinsics(517.3, 516.5, 318.6, 255.3, 640, 480),
    "freiburg2": CameraIntrinsics(520.9, 521.0, 325.1, 249.7, 640, 480),
    "freiburg3": CameraIntrinsics(535.4, 539.2, 320.1, 247.6, 640, 480),
}
DEFAULT_INTRINSICS = CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


class DatasetError(IOError):
    pass


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Timestamped camera-to-world poses."""

    timestamps: np.ndarray
    poses: np.ndarray  # N x 4 x 4

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 4, 4)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def positions(self) -> np.ndarray:
        return self.poses[:, :3, 3]


def write_tum_trajectory(traj: Trajectory, path) -> None:
    lines = []
    for ts, T in zip(traj.timestamps, traj.poses):
        q = Rotation.from_matrix(T[:3, :3]).as_quat()  # x y z w
        vals = [*T[:3, 3], *q]
        lines.append(f"{ts:.6f} " + " ".join(f"{v:.9f}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum_trajectory(path) -> Trajectory:
    ts, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise DatasetError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            v = [float(p) for p in parts]
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        T = np.eye(4)
        T[:3, :3] = Rotation.from_quat(v[4:8]).as_matrix()
        T[:3, 3] = v[1:4]
        ts.append(v[0])
        poses.append(T)
    return Trajectory(np.array(ts), np.array(poses).reshape(-1, 4, 4))


# ---------------------------------------------------------------------------
# association


def read_file_list(path) -> list[tuple[float, str]]:
    """Parse a TUM ``timestamp path`` list, skipping comments."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise DatasetError(f"{path}:{lineno}: malformed line {line!r}")
        try:
            out.append((float(parts[0]), parts[1]))
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
    return out


def associate(first: list, second: list, max_gap: float = MAX_TIME_GAP) -> list[tuple]:
    """Greedy nearest-timestamp matching; returns ``(t1, item1, t2, item2)``."""
    cands = sorted(
        (abs(a[0] - b[0]), i, j) for i, a in enumerate(first) for j, b in enumerate(second)
        if abs(a[0] - b[0]) < max_gap
    )
    used1, used2, pairs = set(), set(), []
    for _, i, j in cands:
        if i in used1 or j in used2:
            continue
        used1.add(i)
        used2.add(j)
        pairs.append((first[i][0], first[i][1], second[j][0], second[j][1]))
    return sorted(pairs)


def read_associations(path) -> list[tuple[float, str, str]]:
    """Parse ``ts path ts path`` lines into ``(timestamp, color, depth)``.

    Either column order is accepted; the depth column is the one whose path
    mentions ``depth``.
    """
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DatasetError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            t1, t2 = float(parts[0]), float(parts[2])
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: bad timestamp") from None
        p1, p2 = parts[1], parts[3]
        if "depth" in p1 and "depth" not in p2:
            out.append((t2, p2, p1))
        else:
            out.append((t1, p1, p2))
    return out


# ---------------------------------------------------------------------------
# sources


@dataclass
class SequenceSource:
    kind: str  # tum | icl-nuim | scannet | synthetic
    root: Optional[Path] = None
    depth_scale: float = TUM_DEPTH_SCALE
    association: list = field(default_factory=list)  # (timestamp, color path, depth path)
    intrinsics: Optional[CameraIntrinsics] = None
    scene: Optional[SyntheticScene] = None
    groundtruth: Optional[Path] = None

    def __post_init__(self):
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")
        ts = [a[0] for a in self.association]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("association timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.scene) if self.kind == "synthetic" else len(self.association)


def _tum_intrinsics(root: Path) -> tuple[CameraIntrinsics, Optional[float]]:
    for name in ("intrinsics.json", "intrinsics.txt"):
        if (root / name).exists():
            return load_intrinsics(root / name)
    for key, K in TUM_INTRINSICS.items():
        if key in root.name:
            return K, None
    return DEFAULT_INTRINSICS, None


def _find_groundtruth(root: Path) -> Optional[Path]:
    for pat in ("groundtruth.txt", "*.gt.freiburg", "*.freiburg"):
        hits = sorted(root.glob(pat))
        if hits:
            return hits[0]
    return None


def open_tum(root, kind: str = "tum") -> SequenceSource:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    if (root / "associations.txt").exists():
        assoc = read_associations(root / "associations.txt")
    elif (root / "rgb.txt").exists() and (root / "depth.txt").exists():
        pairs = associate(read_file_list(root / "rgb.txt"), read_file_list(root / "depth.txt"))
        assoc = [(t, c, d) for t, c, _, d in pairs]
    else:
        raise DatasetError(f"{root}: no associations.txt or rgb.txt/depth.txt")
    K, scale = _tum_intrinsics(root)
    if kind == "icl-nuim" and not (root / "intrinsics.json").exists():
        K = ICL_NUIM_INTRINSICS
    return SequenceSource(kind, root, scale or TUM_DEPTH_SCALE, assoc, K, groundtruth=_find_groundtruth(root))


def open_scannet(root) -> SequenceSource:
    """Pre-extracted ScanNet layout: color/, depth/, pose/, intrinsic/."""
    root = Path(root)
    depth = sorted((root / "depth").glob("*.png"), key=lambda p: int(re.sub(r"\D", "", p.stem) or 0))
    if not depth:
        raise DatasetError(f"{root}: no depth/*.png")
    assoc = []
    for i, d in enumerate(depth):
        c = next((root / "color" / (d.stem + ext) for ext in (".jpg", ".png")
                  if (root / "color" / (d.stem + ext)).exists()), None)
        if c is None:
            raise DatasetError(f"{root}: missing colour image for {d.name}")
        assoc.append((i / 30.0, str(c.relative_to(root)), str(d.relative_to(root))))
    Kmat = np.loadtxt(root / "intrinsic" / "intrinsic_depth.txt")
    w, h = Image.open(depth[0]).size
    K = CameraIntrinsics(Kmat[0, 0], Kmat[1, 1], Kmat[0, 2], Kmat[1, 2], w, h)
    return SequenceSource("scannet", root, 1.0 / 1000.0, assoc, K)


def open_synthetic(spec: str, frames: Optional[int] = None, seed: int = 0) -> SequenceSource:
    """``spec`` is a preset name or a path to a JSON scene description."""
    if Path(spec).suffix == ".json":
        if not Path(spec).exists():
            raise DatasetError(f"scene file not found: {spec}")
        scene = load_scene_config(spec)
    else:
        kw = {"seed": seed}
        if frames is not None:
            kw["n_frames"] = frames
        scene = make_scene(spec, **kw)
    return SequenceSource("synthetic", None, 1.0, [], scene.intrinsics, scene=scene)


def open_source(spec: str, frames: Optional[int] = None, seed: int = 0) -> SequenceSource:
    """Resolve ``kind:location`` strings such as ``synthetic:sphere`` or
    ``tum:/data/rgbd_dataset_freiburg1_xyz``. A bare path is treated as TUM."""
    kind, sep, loc = spec.partition(":")
    if not sep:
        kind, loc = "tum", spec
    if kind == "synthetic":
        return open_synthetic(loc, frames, seed)
    if kind in ("tum", "icl-nuim"):
        return open_tum(loc, kind)
    if kind == "scannet":
        return open_scannet(loc)
    raise DatasetError(f"unknown dataset kind {kind!r}")


# ---------------------------------------------------------------------------
# frames


def read_depth_png(path, scale: float) -> np.ndarray:
    try:
        raw = np.asarray(Image.open(path), dtype=np.float64)
    except FileNotFoundError:
        raise DatasetError(f"missing depth image {path}") from None
    return raw * scale


def read_color(path) -> np.ndarray:
    try:
        img = Image.open(path).convert("RGB")
    except FileNotFoundError:
        raise DatasetError(f"missing colour image {path}") from None
    return np.asarray(img, dtype=np.float64) / 255.0


def write_depth_png(depth: np.ndarray, path, scale: float = TUM_DEPTH_SCALE) -> None:
    d = np.nan_to_num(np.asarray(depth, float), nan=0.0, posinf=0.0, neginf=0.0)
    raw = np.clip(np.round(d / scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def write_color_png(color: np.ndarray, path) -> None:
    Image.fromarray(np.clip(np.round(np.asarray(color) * 255), 0, 255).astype(np.uint8)).save(path)


def quantize_frame(frame: RGBDFrame, depth_scale: float = TUM_DEPTH_SCALE) -> RGBDFrame:
    """Frame as it will read back after a PNG round trip."""
    color = np.clip(np.round(frame.color.data * 255), 0, 255) / 255.0
    d = np.nan_to_num(frame.depth.data, nan=0.0, posinf=0.0, neginf=0.0)
    depth = np.clip(np.round(d / depth_scale), 0, 65535) * depth_scale
    return RGBDFrame(color=color, depth=depth, intrinsics=frame.intrinsics, timestamp=frame.timestamp)


def load_sequence(source: SequenceSource, max_frames: Optional[int] = None, stride: int = 1,
                  start: int = 0) -> Iterator[RGBDFrame]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = len(source)
    idx = range(start, n, stride)
    if max_frames is not None:
        idx = idx[:max_frames]
    for i in idx:
        if source.kind == "synthetic":
            yield render_synthetic(source.scene, i)[0]
            continue
        ts, cpath, dpath = source.association[i]
        depth = read_depth_png(source.root / dpath, source.depth_scale)
        color = read_color(source.root / cpath)
        K = source.intrinsics
        if depth.shape != (K.height, K.width):
            raise DatasetError(f"{dpath}: size {depth.shape} does not match intrinsics")
        yield RGBDFrame(color=color, depth=depth, intrinsics=K, timestamp=ts)


def ground_truth(source: SequenceSource) -> Optional[Trajectory]:
    if source.kind == "synthetic":
        sc = source.scene
        return Trajectory([sc.timestamp(i) for i in range(len(sc))], np.stack(sc.poses))
    if source.groundtruth is None:
        return None
    return read_tum_trajectory(source.groundtruth)


def export_tum(scene: SyntheticScene, root, depth_scale: float = TUM_DEPTH_SCALE) -> Path:
    """Write a synthetic scene in TUM layout (rgb/, depth/, lists, ground truth)."""
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    rgb_lines, depth_lines, assoc_lines, ts_all, poses = [], [], [], [], []
    for i in range(len(scene)):
        frame, T = render_synthetic(scene, i)
        ts = f"{frame.timestamp:.6f}"
        write_color_png(frame.color.data, root / "rgb" / f"{ts}.png")
        write_depth_png(frame.depth.data, root / "depth" / f"{ts}.png", depth_scale)
        rgb_lines.append(f"{ts} rgb/{ts}.png")
        depth_lines.append(f"{ts} depth/{ts}.png")
        assoc_lines.append(f"{ts} rgb/{ts}.png {ts} depth/{ts}.png")
        ts_all.append(frame.timestamp)
        poses.append(T)
    header = "# exported synthetic sequence\n"
    (root / "rgb.txt").write_text(header + "\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text(header + "\n".join(depth_lines) + "\n")
    (root / "associations.txt").write_text("\n".join(assoc_lines) + "\n")
    write_tum_trajectory(Trajectory(ts_all, poses), root / "groundtruth.txt")
    K = scene.intrinsics
    (root / "intrinsics.json").write_text(json.dumps(
        dict(fx=K.fx, fy=K.fy, cx=K.cx, cy=K.cy, width=K.width, height=K.height, depth_scale=depth_scale),
        indent=2))
    return root


_PLY_COLUMNS = {"normals": ("nx", "ny", "nz"), "colors": ("red", "green", "blue")}


def write_ply(path, vertices: np.ndarray, faces: Optional[np.ndarray] = None, **attributes) -> None:
    """ASCII PLY; ``attributes`` are per-vertex arrays (``normals``,
    ``colors`` in [0, 1], or any scalar such as ``radius``), stored as doubles."""
    v = np.asarray(vertices, float).reshape(-1, 3)
    names, cols = ["x", "y", "z"], [v]
    for key, arr in attributes.items():
        if arr is None:
            continue
        arr = np.asarray(arr, float).reshape(len(v), -1)
        names += list(_PLY_COLUMNS.get(key, (key,) if arr.shape[1] == 1 else
                                       tuple(f"{key}_{i}" for i in range(arr.shape[1]))))
        cols.append(arr)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(v)}"]
    lines += [f"property double {n}" for n in names]
    f = np.zeros((0, 3), np.int64) if faces is None else np.asarray(faces, np.int64).reshape(-1, 3)
    if faces is not None:
        lines += [f"element face {len(f)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    body = np.concatenate(cols, axis=1)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for row in body:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")
        for tri in f:
            fh.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Vertices, faces and named vertex columns of a PLY from :func:`write_ply`."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise DatasetError(f"{path}: not an ASCII PLY file")
    end = lines.index("end_header")
    nv = nf = 0
    props = []
    for ln in lines[:end]:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        elif parts[:2] == ["property", "double"]:
            props.append(parts[2])
    rows = lines[end + 1 : end + 1 + nv]
    v = np.array([[float(x) for x in r.split()] for r in rows]).reshape(nv, len(props))
    f = np.array([[int(x) for x in r.split()[1:]] for r in lines[end + 1 + nv : end + 1 + nv + nf]],
                 dtype=np.int64).reshape(nf, 3)
    return v[:, :3], f, {n: v[:, i] for i, n in enumerate(props)}
