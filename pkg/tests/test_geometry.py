import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffslam.autodiff import Tensor
from diffslam.geometry import (
    CameraIntrinsics,
    RigidTransform,
    SingularityError,
    backproject,
    backproject_depth,
    load_intrinsics,
    project,
    se3_exp,
    se3_log,
    so3_exp,
    so3_log,
    transform_project,
)
from diffslam.synthetic import make_scene, render_synthetic
from conftest import grad_check

K = CameraIntrinsics(100.0, 110.0, 20.0, 15.0, 40, 30)


def random_twist(rng, max_angle=np.pi - 1e-3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return np.concatenate([axis * rng.uniform(0, max_angle), rng.normal(size=3)])


def test_intrinsics_invariants():
    with pytest.raises(ValueError):
        CameraIntrinsics(-1.0, 1.0, 0.0, 0.0, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 4.0, 0.0, 4, 4)


def test_intrinsics_scaled_keeps_centre():
    half = CameraIntrinsics(100.0, 100.0, 39.5, 29.5, 80, 60).scaled(0.5)
    assert (half.width, half.height) == (40, 30)
    assert (half.cx, half.cy, half.fx) == (19.5, 14.5, 50.0)


def test_load_intrinsics_json_and_text(tmp_path):
    p = tmp_path / "k.json"
    p.write_text(json.dumps(dict(fx=500, fy=501, cx=319.5, cy=239.5, width=640, height=480, depth_scale=0.001)))
    K1, s1 = load_intrinsics(p)
    q = tmp_path / "k.txt"
    q.write_text("500 501 319.5 239.5 640 480 0.001\n")
    K2, s2 = load_intrinsics(q)
    assert K1 == K2 and s1 == s2 == 0.001
    q.write_text("1 2 3")
    with pytest.raises(ValueError):
        load_intrinsics(q)


# Lie groups


def test_so3_exp_zero_and_quarter_turn():
    assert np.array_equal(so3_exp(np.zeros(3)).data, np.eye(3))
    R = so3_exp(np.array([np.pi / 2, 0, 0])).data
    assert np.allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-12)


@pytest.mark.parametrize("scale", [1e-8, 1e-4, 1e-2, 0.5, 2.0, 3.1])
def test_so3_exp_grad_fd(scale, rng):
    w = rng.normal(size=3)
    w *= scale / np.linalg.norm(w)
    probe = rng.normal(size=(3, 3))
    assert grad_check(lambda a: (so3_exp(a) * Tensor(probe)).sum(), w) < 1e-6


def test_se3_exp_identity_and_pure_translation():
    assert np.array_equal(se3_exp(np.zeros(6)).numpy(), np.eye(4))
    assert np.allclose(se3_log(RigidTransform.identity()).data, 0)
    T = se3_exp(np.array([0, 0, 0, 1.0, -2.0, 0.5])).numpy()
    assert np.array_equal(T[:3, :3], np.eye(3)) and np.allclose(T[:3, 3], [1, -2, 0.5])


def test_se3_roundtrip_1000_twists(rng):
    worst = 0.0
    for _ in range(1000):
        xi = random_twist(rng)
        worst = max(worst, np.abs(se3_log(se3_exp(xi)).data - xi).max())
    assert worst < 1e-9


@given(arrays(np.float64, 6, elements=st.floats(-1.0, 1.0)))
def test_property_exp_is_valid_and_roundtrips(xi):
    T = se3_exp(xi)
    assert T.is_valid()
    assert np.abs(T.log().data - xi).max() < 1e-9


def test_log_near_pi_raises():
    R = so3_exp(np.array([0.0, 0.0, np.pi - 1e-8])).data
    with pytest.raises(SingularityError):
        so3_log(R)


def test_log_close_to_pi_still_unique(rng):
    xi = np.array([0.0, np.pi - 1e-3, 0.0, 0.2, 0.1, -0.3])
    assert np.abs(se3_log(se3_exp(xi)).data - xi).max() < 1e-8


def test_se3_log_grad_fd(rng):
    xi = random_twist(rng, 2.5)
    probe = rng.normal(size=6)
    assert grad_check(lambda a: (se3_log(se3_exp(a)) * Tensor(probe)).sum(), xi) < 1e-5


def test_inverse_and_compose(rng):
    T = se3_exp(random_twist(rng))
    assert np.allclose((T @ T.inverse()).numpy(), np.eye(4), atol=1e-12)
    p = rng.normal(size=(5, 3))
    assert np.allclose(T.inverse().apply(T.apply(p)).data, p, atol=1e-12)


def test_rigid_transform_shape_check():
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3))


# backprojection / projection


def test_principal_point_backprojects_on_axis():
    K2 = CameraIntrinsics(100.0, 100.0, 5.0, 4.0, 11, 9)
    m = backproject_depth(np.full((9, 11), 2.0), K2)
    assert np.array_equal(m.vertices.data[4, 5], [0.0, 0.0, 2.0])


def test_flat_plane_normals_face_camera():
    m = backproject_depth(np.full((30, 40), 1.5), K)
    n = m.normals.data[m.valid]
    assert m.valid.sum() == 28 * 38
    assert np.allclose(n, [0.0, 0.0, -1.0], atol=1e-12)


def test_border_and_invalid_neighbours_masked():
    d = np.full((30, 40), 1.0)
    d[10, 10] = 0.0
    m = backproject_depth(d, K)
    assert not m.valid[0].any() and not m.valid[:, -1].any()
    assert not m.valid[10, 10] and not m.valid[10, 11] and not m.valid[9, 10]
    assert m.valid[12, 12]
    assert np.all(m.vertices.data[~m.valid] == 0)


def test_sphere_render_backprojects_onto_sphere():
    scene = make_scene("sphere", n_frames=1)
    frame, T_wc = render_synthetic(scene, 0)
    m = backproject(frame)
    world = m.vertices.data[m.valid] @ T_wc[:3, :3].T + T_wc[:3, 3]
    on_sphere = scene.nearest_primitive(world) == 0
    assert on_sphere.sum() > 100
    world = world[on_sphere]
    sphere = scene.primitives[0]
    r = np.linalg.norm(world - np.asarray(sphere.center), axis=1)
    assert np.abs(r - sphere.radius).max() < 1e-6


def test_project_identity_point_on_axis():
    uv, z, ok = transform_project(np.array([[0.0, 0.0, 1.0]]), RigidTransform.identity(), K)
    assert np.array_equal(uv.data[0], [K.cx, K.cy]) and z.data[0] == 1.0 and ok[0]


def test_behind_camera_masked():
    _, _, ok = project(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1e-7], [0.1, 0.0, 2.0]]), K)
    assert ok.tolist() == [False, False, True]


def test_camera_translation_shifts_projection():
    p = np.array([[0.2, -0.1, 2.0]])
    dx = 0.05
    # T_cw for a camera moved by +dx along x
    T_cw = RigidTransform.from_rt(np.eye(3), [-dx, 0.0, 0.0])
    base = transform_project(p, RigidTransform.identity(), K)[0].data
    moved = transform_project(p, T_cw, K)[0].data
    assert np.allclose(moved - base, [[-K.fx * dx / 2.0, 0.0]], atol=1e-12)


def test_projection_grad_wrt_twist_fd(rng):
    pts = rng.normal(size=(6, 3)) * 0.3 + [0, 0, 2.0]
    xi = random_twist(rng, 0.3) * 0.1
    probe = rng.normal(size=(6, 2))

    def f(t):
        uv, _, _ = transform_project(Tensor(pts), se3_exp(t), K)
        return (uv * Tensor(probe)).sum()

    assert grad_check(f, xi) < 1e-6
    assert grad_check(lambda p: (transform_project(p, se3_exp(xi), K)[0] * Tensor(probe)).sum(), pts) < 1e-6


def test_projection_inverts_backprojection(rng):
    d = rng.uniform(1.0, 1.02, size=(30, 40))
    m = backproject_depth(d, K, max_jump=None)
    uv, _, _ = project(m.vertices.data[m.valid], K)
    u, v = K.pixel_grid()
    assert np.abs(uv.data - np.stack([u[m.valid], v[m.valid]], 1)).max() < 1e-6


@given(arrays(np.float64, (6, 7), elements=st.floats(0.5, 0.55)))
def test_property_normals_unit_where_valid(d):
    K2 = CameraIntrinsics(10.0, 10.0, 3.0, 2.5, 7, 6)
    m = backproject_depth(d, K2, max_jump=None)
    n = np.linalg.norm(m.normals.data, axis=-1)
    assert np.allclose(n[m.valid], 1.0) and np.all(n[~m.valid] == 0)


def test_backproject_grad_wrt_depth_fd(rng):
    d = rng.uniform(1.0, 1.1, size=(6, 7))
    K2 = CameraIntrinsics(10.0, 10.0, 3.0, 2.5, 7, 6)
    probe = rng.normal(size=(6, 7, 3))

    def f(x):
        m = backproject_depth(x, K2, max_jump=None)
        return (m.normals * Tensor(probe)).sum() + (m.vertices * Tensor(probe)).sum()

    assert grad_check(f, d) < 1e-5
