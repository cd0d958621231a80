import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsesplat import autodiff as ad
from sparsesplat.geometry import (
    Camera, CameraError, covariance_3d, look_at_pose, pixel_centers, project, project_covariance,
    quat_to_rotmat, unproject_g,
)

from conftest import make_camera
from oracles import project_gaussian, quat_matrix


def test_unproject_principal_point(camera):
    x = unproject_g(camera, np.array([camera.cx, camera.cy]), np.array(5.0))
    np.testing.assert_allclose(x.data, [0, 0, 5], atol=1e-15)


def test_project_optical_axis(camera):
    uvz, valid = project(camera, np.array([0.0, 0.0, 5.0]))
    np.testing.assert_allclose(uvz.data, [camera.cx, camera.cy, 5.0])
    assert valid


def test_nonpositive_depth_rejected(camera):
    with pytest.raises(ValueError):
        unproject_g(camera, np.array([1.0, 1.0]), np.array(0.0))


def test_behind_camera_culled_not_error(camera):
    _, valid = project(camera, np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1e-5], [0.0, 0.0, 1.0]]))
    assert valid.tolist() == [False, False, True]


def _posed_camera(seed):
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=3) * 0.5 - np.array([0, 0, 3.0])
    return Camera(fx=40, fy=44, cx=15.3, cy=17.9, width=32, height=36, world_to_cam=look_at_pose(pos, rng.normal(size=3) * 0.2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_roundtrip_project_unproject(seed):
    cam = _posed_camera(seed)
    rng = np.random.default_rng(seed + 1)
    p = rng.uniform([0, 0], [cam.width, cam.height], size=(50, 2))
    d = rng.uniform(0.1, 20, size=50)
    uvz, valid = project(cam, unproject_g(cam, p, d))
    assert valid.all()
    assert np.abs(uvz.data[:, :2] - p).max() < 1e-9
    assert np.abs(uvz.data[:, 2] - d).max() < 1e-9


def test_unproject_is_affine_in_depth():
    cam = _posed_camera(7)
    p = np.array([3.3, 20.1])
    xs = [unproject_g(cam, p, np.array(d)).data for d in (1.0, 2.5, 4.0)]
    np.testing.assert_allclose(xs[1] - xs[0], (xs[2] - xs[0]) / 2, atol=1e-12)


def test_pixel_centers_half_integer(camera):
    pc = pixel_centers(camera)
    assert pc.shape == (32, 32, 2)
    np.testing.assert_array_equal(pc[0, 0], [0.5, 0.5])
    np.testing.assert_array_equal(pc[2, 5], [5.5, 2.5])


def test_isotropic_covariance_scaling(camera):
    r, d = 0.2, 4.0
    cov = project_covariance(camera, np.array([0, 0, d]), r**2 * np.eye(3), dilation=0.3).data
    expect = (camera.fx * r / d) ** 2
    np.testing.assert_allclose(cov, [expect + 0.3, 0.0, expect + 0.3], atol=1e-12)


def test_zero_covariance_is_floor(camera):
    cov = project_covariance(camera, np.array([0.3, -0.2, 2.0]), np.zeros((3, 3))).data
    np.testing.assert_allclose(cov, [0.3, 0.0, 0.3])


def test_nonsymmetric_covariance_rejected(camera):
    s = np.eye(3)
    s[0, 1] = 0.5
    with pytest.raises(ValueError, match="symmetric"):
        project_covariance(camera, np.array([0, 0, 2.0]), s)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_projected_covariance_psd_and_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    cam = _posed_camera(seed)
    q = rng.normal(size=4)
    s = np.exp(rng.normal(size=3) - 2)
    x = unproject_g(cam, rng.uniform(4, 28, size=2), np.array(rng.uniform(1, 8))).data
    sigma = covariance_3d(s, q).data
    a, b, c = project_covariance(cam, x, sigma).data
    assert a > 0 and c > 0 and a * c - b * b >= 0
    _, _, ref = project_gaussian(cam, x, s, q)
    np.testing.assert_allclose([a, b, c], [ref[0, 0], ref[0, 1], ref[1, 1]], rtol=1e-10, atol=1e-12)


def test_quaternion_rotation_matches_oracle(rng):
    for _ in range(20):
        q = rng.normal(size=4)
        r = quat_to_rotmat(q)
        np.testing.assert_allclose(r, quat_matrix(q), atol=1e-14)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)


def test_camera_validation():
    with pytest.raises(CameraError):
        make_camera(f=-1.0)
    bad = np.hstack([np.diag([1.0, 1.0, -1.0]), np.zeros((3, 1))])
    with pytest.raises(CameraError):
        Camera(fx=10, fy=10, cx=5, cy=5, width=10, height=10, world_to_cam=bad)
    with pytest.raises(CameraError):
        Camera(fx=10, fy=10, cx=10, cy=5, width=10, height=10)


def test_camera_dict_roundtrip():
    cam = _posed_camera(3)
    back = Camera.from_dict(cam.to_dict())
    np.testing.assert_array_equal(back.world_to_cam, cam.world_to_cam)
    assert (back.fx, back.fy, back.cx, back.cy, back.width, back.height) == (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
    with pytest.raises(CameraError):
        Camera.from_dict({"fx": 1.0})


def test_unproject_grad_is_ray_direction(camera):
    with ad.Tape():
        d = ad.Tensor(np.array([2.0]), requires_grad=True)
        x = unproject_g(camera, np.array([[4.5, 9.5]]), d)
        ad.backward(ad.sum_(x))
    a = np.array([(4.5 - camera.cx) / camera.fx, (9.5 - camera.cy) / camera.fy, 1.0])
    assert d.grad[0] == pytest.approx(a.sum())
