import json

import numpy as np
import pytest
from PIL import Image

from diffslam.datasets import (
    DatasetError,
    Trajectory,
    associate,
    export_tum,
    ground_truth,
    load_sequence,
    open_source,
    open_tum,
    quantize_frame,
    read_associations,
    read_depth_png,
    read_file_list,
    read_ply,
    read_tum_trajectory,
    write_depth_png,
    write_ply,
    write_tum_trajectory,
)
from diffslam.geometry import CameraIntrinsics, backproject, se3_exp
from diffslam.synthetic import (
    NoiseModel,
    Plane,
    Region,
    SyntheticScene,
    Sphere,
    apply_perturbation,
    look_at,
    make_scene,
    render_synthetic,
    scene_from_config,
)


def small_scene(n=3, **kw):
    return make_scene("sphere", n_frames=n, intrinsics=CameraIntrinsics(30.0, 30.0, 15.5, 11.5, 32, 24), **kw)


# TUM files


def test_depth_png_scale(tmp_path):
    raw = np.array([[5000, 0], [2500, 10000]], dtype=np.uint16)
    Image.fromarray(raw).save(tmp_path / "d.png")
    d = read_depth_png(tmp_path / "d.png", 1 / 5000)
    assert d.tolist() == [[1.0, 0.0], [0.5, 2.0]]


def test_missing_depth_file(tmp_path):
    with pytest.raises(DatasetError):
        read_depth_png(tmp_path / "nope.png", 1 / 5000)


def test_trajectory_roundtrip(tmp_path, rng):
    poses = [se3_exp(rng.normal(size=6)).numpy() for _ in range(5)]
    traj = Trajectory(np.arange(5) * 0.1 + 1e9, poses)
    write_tum_trajectory(traj, tmp_path / "t.txt")
    back = read_tum_trajectory(tmp_path / "t.txt")
    assert np.allclose(back.timestamps, traj.timestamps, atol=1e-6)
    assert np.allclose(back.poses, traj.poses, atol=1e-8)


def test_trajectory_malformed_line_reports_line(tmp_path):
    (tmp_path / "t.txt").write_text("# header\n0 0 0 0 0 0 0 1\n1 2 3\n")
    with pytest.raises(DatasetError, match=":3:"):
        read_tum_trajectory(tmp_path / "t.txt")


def test_file_list_and_association(tmp_path):
    (tmp_path / "rgb.txt").write_text("# c\n1.000 rgb/a.png\n2.000 rgb/b.png\n")
    (tmp_path / "depth.txt").write_text("1.010 depth/a.png\n2.500 depth/b.png\n")
    pairs = associate(read_file_list(tmp_path / "rgb.txt"), read_file_list(tmp_path / "depth.txt"))
    assert pairs == [(1.0, "rgb/a.png", 1.01, "depth/a.png")]
    (tmp_path / "bad.txt").write_text("x rgb/a.png\n")
    with pytest.raises(DatasetError, match=":1:"):
        read_file_list(tmp_path / "bad.txt")


def test_association_column_order(tmp_path):
    (tmp_path / "a.txt").write_text("1.0 depth/a.png 1.0 rgb/a.png\n2.0 rgb/b.png 2.0 depth/b.png\n")
    assert read_associations(tmp_path / "a.txt") == [(1.0, "rgb/a.png", "depth/a.png"), (2.0, "rgb/b.png", "depth/b.png")]
    (tmp_path / "b.txt").write_text("1.0 rgb/a.png\n")
    with pytest.raises(DatasetError):
        read_associations(tmp_path / "b.txt")


def test_missing_dataset_directory(tmp_path):
    with pytest.raises(DatasetError):
        open_tum(tmp_path / "absent")
    with pytest.raises(DatasetError):
        open_tum(tmp_path)
    with pytest.raises(DatasetError):
        open_source("nonsense:foo")


def test_export_reload_bit_identical(tmp_path):
    scene = small_scene()
    root = export_tum(scene, tmp_path / "seq")
    src = open_source(f"tum:{root}")
    frames = list(load_sequence(src))
    assert len(frames) == len(scene)
    for i, f in enumerate(frames):
        ref = quantize_frame(render_synthetic(scene, i)[0])
        assert np.array_equal(f.depth.data, ref.depth.data)
        assert np.array_equal(f.color.data, ref.color.data)
        assert np.array_equal(f.valid, ref.valid)
        assert f.intrinsics == scene.intrinsics
    gt = ground_truth(src)
    assert np.allclose(gt.poses, np.stack(scene.poses), atol=1e-8)


def test_loader_frames_satisfy_invariants(tmp_path):
    root = export_tum(small_scene(noise=2.0), tmp_path / "seq")
    for f in load_sequence(open_tum(root), stride=2):
        assert np.all(f.depth.data[f.valid] > 0)
        assert np.all(np.isfinite(f.color.data))
        assert np.all(f.depth.data[~f.valid] == 0)


def test_loader_detects_missing_frame(tmp_path):
    root = export_tum(small_scene(2), tmp_path / "seq")
    next((root / "depth").glob("*.png")).unlink()
    with pytest.raises(DatasetError):
        list(load_sequence(open_tum(root)))


def test_loader_rejects_bad_stride():
    with pytest.raises(ValueError):
        list(load_sequence(open_source("synthetic:sphere", frames=2), stride=0))


def test_ply_roundtrip(tmp_path, rng):
    v = rng.normal(size=(6, 3))
    f = np.array([[0, 1, 2], [3, 4, 5]])
    n = rng.normal(size=(6, 3))
    write_ply(tmp_path / "m.ply", v, f, normals=n, radius=np.arange(6.0))
    v2, f2, cols = read_ply(tmp_path / "m.ply")
    assert np.array_equal(v2, v) and np.array_equal(f2, f)
    assert np.array_equal(cols["nx"], n[:, 0]) and np.array_equal(cols["radius"], np.arange(6.0))
    (tmp_path / "x.ply").write_text("hello\n")
    with pytest.raises(DatasetError):
        read_ply(tmp_path / "x.ply")


def test_depth_png_clips_to_uint16(tmp_path):
    write_depth_png(np.array([[20.0, np.nan]]), tmp_path / "d.png")
    assert np.array_equal(read_depth_png(tmp_path / "d.png", 1 / 5000), [[65535 * (1 / 5000), 0.0]])


# synthetic renders


def test_sphere_on_axis_centre_depth():
    K = CameraIntrinsics(50.0, 50.0, 10.0, 10.0, 21, 21)
    scene = SyntheticScene([Sphere((0.0, 0.0, 0.0), 1.0)], [look_at((2.0, 0, 0), (0, 0, 0))], K)
    frame, _ = render_synthetic(scene, 0)
    assert frame.depth.data[10, 10] == pytest.approx(1.0, abs=1e-12)


def test_clean_plane_backprojects_planar():
    scene = make_scene("plane", n_frames=1)
    frame, _ = render_synthetic(scene, 0)
    m = backproject(frame)
    assert np.abs(m.vertices.data[m.valid][:, 2] - 1.5).max() < 1e-12


def test_noise_std_matches_model():
    K = CameraIntrinsics(60.0, 60.0, 49.5, 49.5, 100, 100)
    noise = NoiseModel(scale=1.0)
    scene = SyntheticScene([Plane((0, 0, 2.0), (0, 0, -1.0))], [np.eye(4)], K, noise, seed=3)
    frame, _ = render_synthetic(scene, 0)
    std = np.std(frame.depth.data - 2.0)
    assert std == pytest.approx(float(noise.sigma(2.0)), rel=0.1)


def test_render_deterministic_and_seeded():
    a = render_synthetic(small_scene(noise=1.0, seed=4), 1)[0].depth.data
    b = render_synthetic(small_scene(noise=1.0, seed=4), 1)[0].depth.data
    c = render_synthetic(small_scene(noise=1.0, seed=5), 1)[0].depth.data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_camera_inside_primitive_rejected():
    with pytest.raises(ValueError):
        SyntheticScene([Sphere((0, 0, 0), 1.0)], [np.eye(4)], CameraIntrinsics(10, 10, 4, 4, 9, 9))


def test_scene_config_preset_and_explicit():
    a = scene_from_config({"preset": "plane", "n_frames": 2})
    assert len(a) == 2
    b = scene_from_config(dict(
        primitives=[{"type": "plane", "point": [0, 0, 2], "normal": [0, 0, -1]}],
        poses=[np.eye(4).tolist()],
        intrinsics=dict(fx=10, fy=10, cx=4, cy=3, width=9, height=7),
    ))
    f, _ = render_synthetic(b, 0)
    assert np.allclose(f.depth.data, 2.0)


def test_synthetic_source_from_json(tmp_path):
    cfg = {"preset": "corner", "n_frames": 3}
    (tmp_path / "s.json").write_text(json.dumps(cfg))
    src = open_source(f"synthetic:{tmp_path / 's.json'}")
    assert len(src) == 3
    with pytest.raises(DatasetError):
        open_source(f"synthetic:{tmp_path / 'missing.json'}")


# perturbations


def test_occluder_modifies_exactly_the_region():
    frame, _ = render_synthetic(make_scene("plane", n_frames=1), 0)
    out = apply_perturbation(frame, "occluder", Region.centered(frame.shape, 40))
    changed = out.depth.data != frame.depth.data
    assert changed.sum() == 1600
    assert np.all(out.depth.data[changed] == 0.5)


def test_empty_region_leaves_frame_unchanged():
    frame, _ = render_synthetic(make_scene("plane", n_frames=1), 0)
    for kind in ("occluder", "pixel-noise", "uniform-noise"):
        out = apply_perturbation(frame, kind, Region(10, 10, 0, 0))
        assert np.array_equal(out.depth.data, frame.depth.data)
        assert np.array_equal(out.color.data, frame.color.data)


def test_perturbation_seeded():
    frame, _ = render_synthetic(make_scene("plane", n_frames=1), 0)
    r = Region.centered(frame.shape, 20)
    a = apply_perturbation(frame, "uniform-noise", r, seed=7)
    b = apply_perturbation(frame, "uniform-noise", r, seed=7)
    assert np.array_equal(a.depth.data, b.depth.data) and np.array_equal(a.color.data, b.color.data)


def test_perturbation_region_out_of_bounds():
    frame, _ = render_synthetic(make_scene("plane", n_frames=1), 0)
    with pytest.raises(ValueError):
        apply_perturbation(frame, "occluder", Region(50, 70, 40, 40))
    with pytest.raises(ValueError):
        apply_perturbation(frame, "smudge", Region(0, 0, 4, 4))
