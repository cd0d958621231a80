import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsesplat import autodiff as ad
from sparsesplat.autodiff import Tensor
from sparsesplat.geometry import Camera, look_at_pose, unproject_g, pixel_centers
from sparsesplat.losses import (
    Correspondence, LossWeights, flow_loss, photometric, schedule_lambda_s, ssim, total_loss, tv_losses,
)
from sparsesplat.scene import SegMask

from oracles import flow_scalar, photometric_scalar, tv_scalar


def test_photometric_identical_is_zero(rng):
    img = rng.uniform(size=(12, 10, 3))
    assert photometric(img, img).item() == pytest.approx(0.0, abs=1e-15)
    assert ssim(img, img).item() == pytest.approx(1.0)


def test_photometric_l1_offset(rng):
    img = rng.uniform(0.2, 0.8, size=(8, 8, 3))
    assert photometric(img + 0.1, img, lambda_ssim=0.0).item() == pytest.approx(0.1)


def test_photometric_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        photometric(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_photometric_matches_scalar(rng):
    for _ in range(3):
        a, b = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
        assert photometric(a, b).item() == pytest.approx(photometric_scalar(a, b), abs=1e-10)


def test_tv_constant_depth_zero():
    seg = SegMask(np.zeros((6, 6), int), 1)
    tv, mtv = tv_losses(np.full((6, 6), 3.0), seg)
    assert tv.item() == 0.0 and mtv.item() == 0.0


def test_mtv_zero_on_two_planes_with_boundary_mask():
    depth = np.full((8, 8), 2.0)
    depth[:, 4:] = 4.0
    seg = SegMask((depth > 3).astype(int), 2)
    tv, mtv = tv_losses(depth, seg)
    assert tv.item() > 0 and mtv.item() == 0.0


def test_tv_matches_scalar(rng):
    for _ in range(5):
        depth = rng.uniform(0.5, 5.0, size=(8, 8))
        labels = rng.integers(0, 3, size=(8, 8))
        tv, mtv = tv_losses(depth, SegMask(labels, 3))
        ref = tv_scalar(depth, labels)
        assert abs(tv.item() - ref[0]) < 1e-12 and abs(mtv.item() - ref[1]) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_mtv_bounded_by_tv(seed, c):
    rng = np.random.default_rng(seed)
    depth = rng.uniform(0.0, 10.0, size=(7, 9))
    tv, mtv = tv_losses(depth, SegMask(rng.integers(0, c, size=(7, 9)), c))
    assert 0 <= mtv.item() <= tv.item() + 1e-15


def test_lambda_schedule():
    assert schedule_lambda_s(0, 100) == 0.0
    assert schedule_lambda_s(100, 100) == 1.0
    assert schedule_lambda_s(50, 100) == 0.5
    with pytest.raises(ValueError):
        schedule_lambda_s(101, 100)


def test_loss_weight_defaults_and_validation():
    w = LossWeights()
    assert (w.beta_m, w.beta_f, w.lambda_ssim) == (5.0, 0.1, 0.2)
    with pytest.raises(ValueError):
        LossWeights(beta_m=-1)
    with pytest.raises(ValueError):
        LossWeights(lambda_s=1.5)


def test_total_loss_combination():
    t = lambda v: Tensor(v)  # noqa: E731
    w = LossWeights(lambda_s=0.0)
    assert total_loss(t(0.0), t(2.0), t(7.0), t(0.0), w).item() == pytest.approx(10.0)
    assert total_loss(t(0.0), t(0.0), t(0.0), t(0.0), LossWeights()).item() == 0.0
    w = LossWeights(lambda_s=0.25)
    expect = 1.0 + 5 * (0.75 * 2.0 + 0.25 * 3.0) + 0.1 * 4.0
    assert total_loss(t(1.0), t(2.0), t(3.0), t(4.0), w).item() == pytest.approx(expect)


def _stereo_pair(w=16, h=12, f=16.0, baseline=0.2):
    cams = []
    for i, x in enumerate((0.0, baseline)):
        pose = np.hstack([np.eye(3), -np.array([[x], [0.0], [0.0]])])
        cams.append(Camera(fx=f, fy=f, cx=w / 2, cy=h / 2, width=w, height=h, world_to_cam=pose, view_index=i))
    return cams


def _plane_corr(cams, z, src=0, dst=1):
    # fronto-parallel plane at depth z: disparity f * b / z along u
    c0, c1 = cams[src], cams[dst]
    shift = -c0.fx * (c1.center[0] - c0.center[0]) / z
    h, w = c0.height, c0.width
    v, u = np.mgrid[0:h, 0:w]
    p = np.stack([u + 0.5, v + 0.5], -1).reshape(-1, 2)
    q = p + np.array([shift, 0.0])
    keep = (q[:, 0] >= 0.5) & (q[:, 0] <= w - 0.5)
    return Correspondence(src, dst, (v * w + u).ravel()[keep], p[keep], q[keep])


def test_flow_loss_zero_on_consistent_geometry():
    cams = _stereo_pair()
    depths = [Tensor(np.full((12, 16), 3.0)) for _ in cams]
    corrs = [_plane_corr(cams, 3.0, 0, 1), _plane_corr(cams, 3.0, 1, 0)]
    assert flow_loss(depths, cams, corrs).item() < 1e-12


def test_flow_loss_grows_linearly_with_offset():
    cams = _stereo_pair()
    corrs = [_plane_corr(cams, 3.0)]
    vals = []
    for delta in (0.05, 0.1, 0.2):
        depths = [Tensor(np.full((12, 16), 3.0)), Tensor(np.full((12, 16), 3.0 + delta))]
        vals.append(flow_loss(depths, cams, corrs).item())
    assert vals[1] == pytest.approx(2 * vals[0]) and vals[2] == pytest.approx(4 * vals[0])


def test_flow_loss_empty_is_zero():
    cams = _stereo_pair()
    empty = Correspondence(0, 1, np.zeros(0, int), np.zeros((0, 2)), np.zeros((0, 2)))
    assert flow_loss([Tensor(np.ones((12, 16)))] * 2, cams, [empty]).item() == 0.0


def test_flow_loss_matches_scalar(rng):
    cams = _stereo_pair(8, 8, 8.0)
    depths = [rng.uniform(1.0, 4.0, (8, 8)) for _ in cams]
    corrs, pairs = [], []
    for i, j in ((0, 1), (1, 0)):
        idx = rng.choice(64, 20, replace=False)
        v, u = np.divmod(idx, 8)
        p = np.stack([u + 0.5, v + 0.5], -1).astype(float)
        q = p + rng.uniform(-2, 2, p.shape)
        corrs.append(Correspondence(i, j, idx, p, q))
        pairs.append((i, j, [(a[0], a[1], b[0], b[1]) for a, b in zip(p, q)]))
    got = flow_loss([Tensor(d) for d in depths], cams, corrs).item()
    assert got == pytest.approx(flow_scalar(depths, cams, pairs), abs=1e-10)


def test_losses_nonnegative(rng):
    a, b = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    assert photometric(a, b).item() >= 0
    tv, mtv = tv_losses(rng.uniform(0, 3, (8, 8)), SegMask(rng.integers(0, 2, (8, 8)), 2))
    assert tv.item() >= 0 and mtv.item() >= 0
