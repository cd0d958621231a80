import numpy as np
import pytest

from sparsesplat import autodiff as ad
from sparsesplat.autodiff import Tensor
from sparsesplat.geometry import Camera, covariance_3d, pixel_centers, project_covariance, unproject_g
from sparsesplat.scene import (
    OPACITY_MAX, OPACITY_MIN, PixelGaussianGrid, SegMask, alpha_init_for_views, materialize,
    radius_from_depth, unfreeze_covariance,
)



def _grid(camera, rng, depth=None):
    h, w = camera.height, camera.width
    depth = rng.uniform(1.5, 4.0, size=(h, w)) if depth is None else depth
    return PixelGaussianGrid.create(0, depth, rng.uniform(size=(h, w, 3)), 0.5)


def test_radius_literal_example():
    cam = Camera(fx=100, fy=100, cx=50, cy=100, width=100, height=200)
    assert radius_from_depth(cam, 2.0, "literal") == pytest.approx(1.0)


def test_radius_linear_in_depth(camera):
    for conv in ("pixel", "literal"):
        assert radius_from_depth(camera, 6.0, conv) == pytest.approx(2 * radius_from_depth(camera, 3.0, conv))
    with pytest.raises(ValueError):
        radius_from_depth(camera, 1.0, "meters")


def test_pixel_radius_footprint_is_one_pixel(camera):
    d = 3.0
    r = radius_from_depth(camera, d)
    cov = project_covariance(camera, np.array([0, 0, d]), r**2 * np.eye(3), dilation=0.0).data
    # the sphere's diameter maps to one pixel vertically
    assert 2 * np.sqrt(cov[2]) == pytest.approx(1.0)


def test_alpha_init_table():
    assert alpha_init_for_views(2) == 0.6
    assert alpha_init_for_views(3) == 0.5
    assert alpha_init_for_views(4) == 0.35
    assert alpha_init_for_views(7) == 0.35
    with pytest.raises(ValueError):
        alpha_init_for_views(1)


def test_zero_residual_materialize(camera, rng):
    g = _grid(camera, rng)
    h, w = g.shape
    cloud = materialize(g, np.zeros((h, w)), np.zeros((h, w)), camera)
    expect = unproject_g(camera, pixel_centers(camera), g.depth_init).data.reshape(-1, 3)
    np.testing.assert_allclose(cloud.positions.data, expect, atol=1e-12)
    np.testing.assert_array_equal(cloud.opacity.data, 0.5)
    assert len(cloud) == h * w
    np.testing.assert_array_equal(cloud.quats.data, np.tile([1.0, 0, 0, 0], (h * w, 1)))


def test_positions_stay_on_rays(camera, rng):
    g = _grid(camera, rng)
    h, w = g.shape
    res = rng.normal(scale=0.3, size=(h, w))
    cloud = materialize(g, res, rng.normal(scale=2.0, size=(h, w)), camera)
    ref = unproject_g(camera, pixel_centers(camera), cloud.depth.data).data.reshape(-1, 3)
    assert np.abs(cloud.positions.data - ref).max() < 1e-9
    assert cloud.opacity.data.min() >= OPACITY_MIN and cloud.opacity.data.max() <= OPACITY_MAX


def test_nan_residual_names_view(camera, rng):
    g = _grid(camera, rng)
    g.view_index = 2
    res = np.zeros(g.shape)
    res[3, 3] = np.nan
    with pytest.raises(FloatingPointError, match="view 2"):
        materialize(g, res, np.zeros(g.shape), camera)


def test_position_grad_wrt_residual_fd(camera, rng):
    g = _grid(camera, rng)
    h, w = g.shape
    base = rng.normal(scale=0.1, size=(h, w))
    wts = rng.normal(size=(h * w, 3))

    def f(r):
        return float((materialize(g, r, np.zeros((h, w)), camera).positions.data * wts).sum())

    with ad.Tape():
        r = Tensor(base, requires_grad=True)
        cloud = materialize(g, r, np.zeros((h, w)), camera)
        ad.backward(ad.sum_(ad.mul(cloud.positions, Tensor(wts))))
    v = rng.normal(size=(h, w))
    eps = 1e-6
    num = (f(base + eps * v) - f(base - eps * v)) / (2 * eps)
    ana = float((r.grad * v).sum())
    assert abs(ana - num) / max(abs(ana), abs(num)) < 1e-5


def test_unfreeze_is_value_continuous(camera, rng):
    g = _grid(camera, rng)
    z = np.zeros(g.shape)
    before = materialize(g, z, z, camera)
    sb = covariance_3d(before.scales, before.quats).data
    unfreeze_covariance(g, g.depth_init, camera)
    g.frozen_covariance = False
    after = materialize(g, z, z, camera)
    sa = covariance_3d(after.scales, after.quats).data
    assert np.abs(sa - sb).max() < 1e-12 * np.abs(sb).max()


def test_segmask_partition_checks():
    s = np.zeros((2, 3, 3))
    s[0] = 1
    m = SegMask.from_onehot(s)
    np.testing.assert_array_equal(m.onehot().sum(0), 1)
    s[1, 0, 0] = 1
    with pytest.raises(ValueError, match="partition"):
        SegMask.from_onehot(s)
    with pytest.raises(ValueError):
        SegMask(np.full((2, 2), 3), 3)


def test_grid_rejects_nonpositive_depth(rng):
    with pytest.raises(ValueError):
        PixelGaussianGrid.create(0, np.zeros((2, 2)), np.zeros((2, 2, 3)), 0.5)
