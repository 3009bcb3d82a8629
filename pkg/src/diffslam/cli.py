"""Command-line entry point: ``diffslam run | bench-gradlm | experiment``.

Exit codes: 0 success, 1 pipeline failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .autodiff import Tape, Tensor, backward, no_grad
from .curvefit import FAMILIES, SOLVERS, SuiteConfig, curve_suite, write_csv
from .datasets import (DatasetError, SequenceSource, Trajectory, ground_truth, load_sequence, open_source,
                       write_ply, write_tum_trajectory)
from .geometry import backproject
from .gradlm import GatingParams
from .metrics import InsufficientDataError, chamfer, trajectory_metrics
from .odometry import TrackingError, run_icp_odometry, run_icp_slam
from .surfels import run_pointfusion
from .tsdf import TSDFVolume, run_kinectfusion

PIPELINES = ("icp-odom", "icp-slam", "pointfusion", "kinectfusion")
EXPERIMENTS = ("grad-analysis", "completion")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    pipeline: Optional[str] = None  # kinectfusion for run, pointfusion for experiments
    dataset: str = "synthetic:sphere"
    out: str = "out"
    seed: int = 0
    frames: Optional[int] = None
    stride: int = 1
    iters: int = 10
    voxels: int = 32
    mu: Optional[float] = None  # metres; three voxels when unset
    volume_center: Optional[list] = None
    volume_extent: Optional[float] = None
    sigma_assoc: Optional[float] = None
    noise: float = 0.0  # synthetic depth noise scale
    lm_lambda_min: float = GatingParams.lambda_min
    lm_lambda_max: float = GatingParams.lambda_max
    lm_D: float = GatingParams.D
    lm_sigma: float = GatingParams.sigma
    lm_step_steepness: float = GatingParams.step_steepness
    compat_qx_sign: bool = False
    gradients: bool = False
    # experiment options
    perturbation: str = "occluder"
    region_size: int = 40
    frame_index: int = -1
    steps: int = 100
    lr: float = 0.2
    optimize_color: bool = False
    # benchmark options
    n_instances: int = 100
    families: list = field(default_factory=lambda: list(FAMILIES))
    budgets: list = field(default_factory=lambda: [10, 50, 100])

    def validate(self, command: str) -> None:
        if self.pipeline is None:
            self.pipeline = "kinectfusion" if command == "run" else "pointfusion"
        if command == "run" and self.pipeline not in PIPELINES:
            raise ConfigError(f"pipeline: unknown {self.pipeline!r}; choose from {', '.join(PIPELINES)}")
        if command == "experiment" and self.pipeline not in ("pointfusion", "kinectfusion", "icp-slam"):
            raise ConfigError(f"pipeline: {self.pipeline!r} has no differentiable map")
        for name in ("iters", "voxels", "stride", "steps", "n_instances", "region_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.frames is not None and self.frames < 1:
            raise ConfigError("frames: must be >= 1")
        if self.mu is not None and self.mu <= 0:
            raise ConfigError("mu: must be positive")
        if self.sigma_assoc is not None and self.sigma_assoc <= 0:
            raise ConfigError("sigma_assoc: must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed: must be a 64-bit unsigned integer")
        bad = [f for f in self.families if f not in FAMILIES]
        if bad:
            raise ConfigError(f"families: unknown {bad}")
        try:
            self.gating()
        except ValueError as exc:
            raise ConfigError(f"lm parameters: {exc}") from None

    def gating(self) -> GatingParams:
        return GatingParams(lambda_min=self.lm_lambda_min, lambda_max=self.lm_lambda_max, D=self.lm_D,
                            sigma=self.lm_sigma, step_steepness=self.lm_step_steepness,
                            compat_qx_sign=self.compat_qx_sign)


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with the same keys as the flags (flags win)")
    p.add_argument("--dataset", help="synthetic:<preset|scene.json>, tum:<dir>, icl-nuim:<dir>, scannet:<dir>")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int, help="maximum number of frames")
    p.add_argument("--stride", type=int)
    p.add_argument("--iters", type=int, help="solver iterations per frame")
    p.add_argument("--voxels", type=int, help="TSDF volume resolution per side")
    p.add_argument("--mu", type=float, help="TSDF truncation distance in metres")
    p.add_argument("--volume-center", type=lambda s: [float(x) for x in s.split(",")], metavar="X,Y,Z")
    p.add_argument("--volume-extent", type=float, help="TSDF volume side length in metres")
    p.add_argument("--sigma-assoc", type=float, help="fixed association falloff (metres)")
    p.add_argument("--noise", type=float, help="synthetic depth noise scale")
    p.add_argument("--lm-lambda-min", type=float)
    p.add_argument("--lm-lambda-max", type=float)
    p.add_argument("--lm-D", type=float)
    p.add_argument("--lm-sigma", type=float)
    p.add_argument("--lm-step-steepness", type=float)
    p.add_argument("--compat-qx-sign", action="store_true", default=None,
                   help="reverse the iterate gate so worsening steps are favoured")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffslam", description="Differentiable dense RGB-D SLAM")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a SLAM pipeline on a sequence")
    run.add_argument("--pipeline", help=" | ".join(PIPELINES))
    run.add_argument("--gradients", action="store_true", default=None,
                     help="dump per-pixel gradient maps of each frame's fit to the final map")
    _common(run)

    bench = sub.add_parser("bench-gradlm", help="curve-fitting solver benchmark (CSV)")
    bench.add_argument("--config")
    bench.add_argument("--out", help="CSV path")
    bench.add_argument("--seed", type=int)
    bench.add_argument("--n-instances", type=int)
    bench.add_argument("--families", type=lambda s: s.split(","))
    bench.add_argument("--budgets", type=lambda s: [int(x) for x in s.split(",")])
    bench.add_argument("--lm-lambda-min", type=float)
    bench.add_argument("--lm-lambda-max", type=float)
    bench.add_argument("--lm-D", type=float)
    bench.add_argument("--lm-sigma", type=float)
    bench.add_argument("--lm-step-steepness", type=float)
    bench.add_argument("--compat-qx-sign", action="store_true", default=None)

    exp = sub.add_parser("experiment", help="gradient analysis or completion by descent")
    exp.add_argument("kind", choices=EXPERIMENTS)
    exp.add_argument("--pipeline", help="pointfusion | kinectfusion | icp-slam")
    exp.add_argument("--perturbation", choices=("occluder", "pixel-noise", "uniform-noise"))
    exp.add_argument("--region-size", type=int)
    exp.add_argument("--frame-index", type=int)
    exp.add_argument("--steps", type=int)
    exp.add_argument("--lr", type=float)
    exp.add_argument("--optimize-color", action="store_true", default=None)
    _common(exp)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    values = {}
    names = {f.name for f in fields(RunConfig)}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config: file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {exc}") from None
        doc = {k.replace("-", "_"): v for k, v in doc.items()}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError(f"config: unknown keys {unknown}")
        values.update(doc)
    for k, v in vars(args).items():
        if k in names and v is not None:
            values[k] = v
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def _open(cfg: RunConfig) -> tuple[SequenceSource, list]:
    source = open_source(cfg.dataset, cfg.frames, cfg.seed)
    if source.kind == "synthetic":
        source.scene.seed = cfg.seed
        if cfg.noise:
            source.scene.noise.scale = cfg.noise
    frames = list(load_sequence(source, cfg.frames, cfg.stride))
    if not frames:
        raise DatasetError(f"{cfg.dataset}: no frames")
    return source, frames


def _initial_pose(gt: Optional[Trajectory], frames) -> np.ndarray:
    if gt is None or len(gt) == 0:
        return np.eye(4)
    i = int(np.argmin(np.abs(gt.timestamps - frames[0].timestamp)))
    return gt.poses[i]


def _volume(cfg: RunConfig, source: SequenceSource, frames, pose0: np.ndarray) -> TSDFVolume:
    center, extent = cfg.volume_center, cfg.volume_extent
    hint = source.scene.volume_hint if source.kind == "synthetic" else None
    if hint is not None:
        center = hint[0] if center is None else center
        extent = hint[1] if extent is None else extent
    if center is None or extent is None:
        # centre on the median depth along the first optical axis
        d = float(np.median(frames[0].depth.data[frames[0].valid]))
        center = pose0[:3, :3] @ np.array([0.0, 0.0, d]) + pose0[:3, 3] if center is None else center
        extent = 1.5 * d if extent is None else extent
    vs = extent / cfg.voxels
    mu = cfg.mu if cfg.mu is not None else 3 * vs
    return TSDFVolume.around(np.asarray(center, float), extent, cfg.voxels, mu)


def _dump_gradients(frames, traj: Trajectory, points: np.ndarray, out: Path) -> None:
    """|d chamfer(frame points, map) / d depth| per pixel, one .npy per frame."""
    gdir = out / "gradients"
    gdir.mkdir(parents=True, exist_ok=True)
    for k, (frame, T) in enumerate(zip(frames, traj.poses)):
        depth = Tensor(frame.depth.data.copy(), requires_grad=True)
        with Tape() as tape:
            m = backproject(frame.with_depth(depth))
            v = m.vertices.reshape(-1, 3)[np.flatnonzero(m.valid.reshape(-1))]
            if v.shape[0] == 0:
                continue
            loss = chamfer(v @ Tensor(T[:3, :3]).T + T[:3, 3], points)
            backward(loss, tape)
        g = np.abs(depth.grad) if depth.grad is not None else np.zeros(frame.shape)
        np.save(gdir / f"frame_{k:05d}.npy", g)


def cmd_run(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    source, frames = _open(cfg)
    gt = ground_truth(source)
    pose0 = _initial_pose(gt, frames)
    gating = cfg.gating()
    out.mkdir(parents=True, exist_ok=True)
    metrics: dict = dict(pipeline=cfg.pipeline, n_frames=len(frames))
    with no_grad():
        if cfg.pipeline == "icp-odom":
            traj, _ = run_icp_odometry(frames, cfg.iters, gating, pose0)
            points = None
        elif cfg.pipeline == "icp-slam":
            traj, model = run_icp_slam(frames, cfg.iters, gating, pose0)
            points = model.positions
            write_ply(out / "map.ply", model.positions, normals=model.normals)
            metrics["map_points"] = len(model)
        elif cfg.pipeline == "pointfusion":
            traj, smap = run_pointfusion(frames, cfg.iters, gating, pose0, cfg.sigma_assoc)
            points = smap.positions.data
            write_ply(out / "map.ply", points, normals=smap.normals.data, colors=smap.colors.data,
                      radius=smap.radii.data, confidence=smap.confidences.data)
            metrics["surfels"] = len(smap)
        else:
            volume = _volume(cfg, source, frames, pose0)
            traj, volume, mesh = run_kinectfusion(frames, volume, cfg.iters, gating, pose0)
            volume.save(out / "volume.bin")
            write_ply(out / "mesh.ply", mesh.vertices, mesh.faces, normals=mesh.normals)
            points = mesh.vertices if len(mesh.vertices) else None
            metrics["active_voxels"] = volume.active_count()
            metrics["mesh_vertices"] = int(len(mesh.vertices))
    write_tum_trajectory(traj, out / "trajectory.txt")
    if gt is not None:
        try:
            metrics.update(trajectory_metrics(traj, gt).as_dict())
        except InsufficientDataError as exc:
            metrics["trajectory_metrics_error"] = str(exc)
    if cfg.gradients and points is not None and len(points):
        _dump_gradients(frames, traj, np.asarray(points), out)
    _write_json(out / "metrics.json", metrics)
    _write_manifest(out, "run", cfg, metrics)
    return 0


def cmd_bench_gradlm(cfg: RunConfig) -> int:
    suite = SuiteConfig(n_instances=cfg.n_instances, budgets=tuple(cfg.budgets), seed=cfg.seed,
                        gating=cfg.gating())
    rows = []
    for fam in cfg.families:
        rows.extend(curve_suite(fam, suite, SOLVERS))
    path = Path(cfg.out)
    if path.suffix != ".csv":
        path.mkdir(parents=True, exist_ok=True)
        path = path / "gradlm_bench.csv"
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(rows, path)
    for r in rows:
        print(f"{r['family']:12s} {r['solver']:7s} {r['max_iters']:4d}  f-space {r['mse_f']:.4g}")
    return 0


def cmd_experiment(kind: str, cfg: RunConfig) -> int:
    from .experiments import (completion_by_descent, gradient_analysis, write_heatmap, write_loss_curve)
    from .synthetic import Region, apply_perturbation

    source, frames = _open(cfg)
    gt = ground_truth(source)
    if gt is None:
        raise ConfigError("dataset: experiments need ground-truth poses")
    poses = [gt.poses[int(np.argmin(np.abs(gt.timestamps - f.timestamp)))] for f in frames]
    idx = cfg.frame_index % len(frames)
    target = frames[idx]
    size = min(cfg.region_size, *target.shape)
    region = Region.centered(target.shape, size)
    perturbed = apply_perturbation(target, cfg.perturbation, region, seed=cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if kind == "grad-analysis":
        report = gradient_analysis(frames, poses, perturbed, idx, region, cfg.pipeline)
        write_heatmap(report.magnitude, out / "gradient_heatmap.png")
        np.save(out / "gradient_magnitude.npy", report.magnitude)
        metrics = report.summary()
    else:
        res = completion_by_descent(frames, poses, perturbed, region, idx, cfg.steps, cfg.lr, cfg.pipeline,
                                    cfg.optimize_color)
        write_loss_curve(res.losses, out / "loss_curve.csv")
        np.save(out / "recovered_depth.npy", res.frame.depth.data)
        metrics = res.summary()
    metrics = dict(experiment=kind, **metrics)
    _write_json(out / "metrics.json", metrics)
    _write_manifest(out, f"experiment {kind}", cfg, metrics)
    return 0


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_manifest(out: Path, command: str, cfg: RunConfig, metrics: dict) -> None:
    _write_json(out / "manifest.json", dict(command=command, version=__version__, seed=cfg.seed,
                                            config=asdict(cfg), metrics=metrics))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    try:
        cfg = resolve_config(args)
        cfg.validate(args.command)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "bench-gradlm":
            return cmd_bench_gradlm(cfg)
        return cmd_experiment(args.kind, cfg)
    except (ConfigError, DatasetError) as exc:
        print(f"diffslam: error: {exc}", file=sys.stderr)
        return 2
    except (TrackingError, InsufficientDataError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"diffslam: pipeline failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
