import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semsplat.core import (Camera, PcaModel, Scene, axis_angle_to_quat, axis_angle_to_rotation,
                           covariance_3d, quat_multiply, quat_rotation_backward, quat_to_rotation,
                           resample_point_cloud, rotation_angle, rotation_to_quat, scene_extent)

from conftest import front_camera, random_scene

quat = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1)


@settings(max_examples=100, deadline=None)
@given(quat)
def test_rotation_is_orthonormal(q):
    R = quat_to_rotation(np.array(q))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(quat)
def test_quat_matrix_round_trip(q):
    q = np.array(q) / np.linalg.norm(q)
    back = rotation_to_quat(quat_to_rotation(q))
    assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-9


def test_zero_quaternion_rejected():
    with pytest.raises(ValueError, match="degenerate rotation"):
        quat_to_rotation(np.zeros(4))


def test_quat_multiply_composes_rotations(rng):
    a, b = rng.normal(size=4), rng.normal(size=4)
    np.testing.assert_allclose(quat_to_rotation(quat_multiply(a, b)),
                               quat_to_rotation(a) @ quat_to_rotation(b), atol=1e-12)


def test_axis_angle():
    R = axis_angle_to_rotation([0, 0, np.pi / 2])
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-12)
    assert rotation_angle(axis_angle_to_rotation([0.1, -0.2, 0.3])) == pytest.approx(np.linalg.norm([0.1, -0.2, 0.3]))
    np.testing.assert_array_equal(axis_angle_to_quat(np.zeros(3)), [1, 0, 0, 0])


def test_covariance_is_rotated_diagonal():
    R = axis_angle_to_rotation([0.3, 0.1, -0.4])
    cov = covariance_3d(np.array([1.0, 2.0, 3.0]), rotation_to_quat(R))
    np.testing.assert_allclose(cov, R @ np.diag([1.0, 4.0, 9.0]) @ R.T, atol=1e-12)
    with pytest.raises(ValueError):
        covariance_3d(np.array([1.0, 0.0, 1.0]), np.array([1.0, 0, 0, 0]))


def test_quat_rotation_backward_matches_finite_differences(rng):
    q = rng.normal(size=4)
    G = rng.normal(size=(3, 3))
    analytic = quat_rotation_backward(q, G)
    h = 1e-6
    numeric = np.zeros(4)
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        numeric[i] = (np.sum(G * quat_to_rotation(q + e)) - np.sum(G * quat_to_rotation(q - e))) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, atol=1e-8)


def test_camera_projects_on_axis_point_to_principal_point():
    cam = Camera(100, 100, 32, 24, 64, 48, np.eye(4))
    np.testing.assert_allclose(cam.project_points(np.array([[0.0, 0.0, 2.0]])), [[32, 24]])
    # y down: a point below the axis (positive y) lands at a larger row
    assert cam.project_points(np.array([[0.0, 0.5, 2.0]]))[0, 1] > 24


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(0, 1, 0, 0, 4, 4, np.eye(4))
    bad = np.eye(4)
    bad[0, 0] = 2
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, 4, 4, bad)
    with pytest.raises(ValueError):
        Camera(1, 1, 0, 0, 0, 4, np.eye(4))


def test_look_at_centres_target_and_round_trips():
    cam = Camera.look_at([3, 1, 2], [0, 0, 0.5], width=40, height=30, fov_deg=50)
    np.testing.assert_allclose(cam.project_points(np.array([[0, 0, 0.5]])), [[20, 15]], atol=1e-9)
    np.testing.assert_allclose(cam.center, [3, 1, 2], atol=1e-12)
    assert cam.to_camera(np.array([0, 0, 0.5]))[2] > 0
    # world up maps to image up (negative v)
    above = cam.project_points(np.array([[0, 0, 1.0]]))[0, 1]
    assert above < 15
    back = Camera.from_dict(cam.to_dict())
    np.testing.assert_array_equal(back.world_to_camera, cam.world_to_camera)


def test_pixel_rays_hit_projected_points():
    cam = Camera.look_at([2, -1, 1], [0, 0, 0], width=8, height=6, fov_deg=60)
    rays = cam.pixel_rays()
    p = cam.center + 2.5 * rays[3, 5]
    np.testing.assert_allclose(cam.project_points(p[None])[0], [5, 3], atol=1e-9)


def test_scene_validate_and_copy():
    s = random_scene(5, k=4)
    s.validate()
    c = s.copy()
    c.positions[0, 0] += 1
    assert s.positions[0, 0] != c.positions[0, 0]
    sub = s.subset([1, 3])
    assert len(sub) == 2 and sub.feature_dim == 4
    bad = s.replace(features=np.zeros((5, 3)))
    with pytest.raises(ValueError, match="PCA components"):
        bad.validate()
    bad = s.replace(quats=np.zeros((5, 4)))
    with pytest.raises(ValueError):
        bad.validate()
    bad = s.replace(positions=np.full((5, 3), np.nan))
    with pytest.raises(ValueError):
        bad.validate()


def test_scene_from_points_activations():
    s = Scene.from_points(np.zeros((3, 3)), np.full((3, 3), 0.5), scales=[0.1, 0.2, 0.3], opacity=0.1)
    np.testing.assert_allclose(s.opacities, 0.1, rtol=1e-6)
    np.testing.assert_allclose(s.scales[:, 0], [0.1, 0.2, 0.3], rtol=1e-6)
    np.testing.assert_array_equal(s.quats[:, 0], 1)
    assert s.dtype == np.float32


def test_pca_identity():
    m = PcaModel.identity(3)
    assert m.components == 3 and m.input_dim == 3


def test_resample_keeps_small_clouds(rng):
    pts = rng.normal(size=(50, 3))
    cols = rng.uniform(size=(50, 3))
    p, c = resample_point_cloud(pts, cols, 100)
    np.testing.assert_array_equal(p, pts)


def test_resample_reaches_target(rng):
    pts = rng.uniform(size=(20000, 3))
    cols = rng.uniform(size=(20000, 3))
    p, c = resample_point_cloud(pts, cols, 2000)
    assert abs(len(p) - 2000) <= 200
    assert p.min() >= 0 and p.max() <= 1
    assert c.shape == p.shape


def test_resample_rejects_empty():
    with pytest.raises(ValueError):
        resample_point_cloud(np.zeros((0, 3)), np.zeros((0, 3)), 10)


def test_scene_extent():
    assert scene_extent(np.array([[0, 0, 0], [3, 4, 0]])) == pytest.approx(5.0)


def test_front_camera_helper():
    cam = front_camera(16)
    assert cam.shape == (16, 16)
