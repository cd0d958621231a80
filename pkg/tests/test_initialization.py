import numpy as np
import pytest
from scipy.ndimage import binary_erosion
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsesplat import synth
from sparsesplat.autodiff import no_grad
from sparsesplat.config import TrainConfig
from sparsesplat.initialization import (
    _alignment_terms, align_depths, alignment_objective, all_consistency_masks, consistency_mask, init_scene,
    initialize, segment_by_depth,
)
from sparsesplat.losses import Correspondence, build_correspondences
from sparsesplat.raster import render
from sparsesplat.scene import PixelGaussianGrid, materialize


def _translation(h, w, du, dv):
    f = np.zeros((h, w, 2))
    f[..., 0], f[..., 1] = du, dv
    return f


def test_pure_translation_mask():
    f = _translation(10, 12, 3.0, 0.0)
    m = consistency_mask(f, -f, 1.0)
    # warp leaves the image for the last three columns (u + 3 > 12)
    assert m[:, :9].all() and not m[:, 10:].any()


def test_violated_inverse_all_zero():
    f = _translation(8, 8, 1.0, 1.0)
    assert not consistency_mask(f, -f + np.array([2.0, 0.0]), 1.0).any()


def _mask_oracle(fij, fji, tau):
    h, w = fij.shape[:2]
    out = np.zeros((h, w), np.uint8)
    for y in range(h):
        for x in range(w):
            qu, qv = x + 0.5 + fij[y, x, 0], y + 0.5 + fij[y, x, 1]
            if not (0 <= qu <= w and 0 <= qv <= h):
                continue
            gx = min(max(qu - 0.5, 0), w - 1)
            gy = min(max(qv - 0.5, 0), h - 1)
            x0, y0 = min(int(gx), w - 2), min(int(gy), h - 2)
            tx, ty = gx - x0, gy - y0
            b = (fji[y0, x0] * (1 - tx) * (1 - ty) + fji[y0, x0 + 1] * tx * (1 - ty)
                 + fji[y0 + 1, x0] * (1 - tx) * ty + fji[y0 + 1, x0 + 1] * tx * ty)
            out[y, x] = np.hypot(*(fij[y, x] + b)) <= tau
    return out


def test_mask_matches_per_pixel_oracle(rng):
    for _ in range(5):
        fij = rng.normal(0, 2, (9, 11, 2))
        fji = -fij + rng.normal(0, 0.7, (9, 11, 2))
        np.testing.assert_array_equal(consistency_mask(fij, fji, 1.0), _mask_oracle(fij, fji, 1.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(-6, 6), st.integers(-6, 6))
def test_mask_symmetric_on_translations(du, dv):
    h, w = 10, 12
    f = _translation(h, w, float(du), float(dv))
    mij, mji = consistency_mask(f, -f), consistency_mask(-f, f)
    for y in range(h):
        for x in range(w):
            qx, qy = x + du, y + dv
            if mij[y, x] and 0 <= qx < w and 0 <= qy < h:
                assert mji[qy, qx] == 1


def test_missing_reverse_flow_rejected():
    with pytest.raises(ValueError, match="reverse"):
        all_consistency_masks({(0, 1): np.zeros((4, 4, 2))})


def _aligned_inputs(corruption, noise=0.0, n_views=None):
    spec = synth.SynthSpec(n_views=n_views or len(corruption), corruption=corruption, depth_noise=noise)
    sc = synth.generate(spec)
    masks = all_consistency_masks(sc.flows)
    return sc, build_correspondences(sc.flows, masks, sc.cameras)


def test_two_view_planted_recovery():
    sc, corrs = _aligned_inputs([(1.0, 0.0), (2.0, 0.5)])
    a = align_depths(sc.monodepths, corrs, sc.cameras)
    assert a.scales[1] == pytest.approx(2.0, rel=1e-3)
    assert a.offsets[1] == pytest.approx(0.5, rel=1e-3)
    assert (a.scales[0], a.offsets[0]) == (1.0, 0.0)


def test_consistent_depths_are_a_fixed_point():
    sc, corrs = _aligned_inputs([(1.0, 0.0)] * 3)
    a = align_depths(sc.monodepths, corrs, sc.cameras)
    assert np.abs(a.scales - 1).max() < 1e-4 and np.abs(a.offsets).max() < 1e-4
    assert a.history[-1] < 0.01


def test_masked_pixels_contribute_no_gradient(rng):
    sc, corrs = _aligned_inputs([(1.0, 0.0), (1.3, 0.2)])
    c = corrs[0]
    mds = [d.copy() for d in sc.monodepths]
    s, o = np.array([1.0, 1.1]), np.array([0.0, 0.1])
    before = alignment_objective(_alignment_terms(mds, corrs, sc.cameras), s, o)
    # scribble over pixels of view 0 that are not in any correspondence
    used = np.zeros(mds[0].size, bool)
    for cc in corrs:
        if cc.src == 0:
            used[cc.pixel_index] = True
    unused = ~used.reshape(mds[0].shape)
    unused &= np.ones_like(unused)  # view 0 is only a source here through corrs[0]
    assert unused.any()
    mds[0][unused] = rng.uniform(10, 20, unused.sum())
    corrs_src = [cc for cc in corrs if cc.src == 0]
    after = alignment_objective(_alignment_terms(mds, corrs_src, sc.cameras), s, o)
    before_src = alignment_objective(_alignment_terms(sc.monodepths, corrs_src, sc.cameras), s, o)
    assert after[0] == before_src[0]
    np.testing.assert_array_equal(after[1], before_src[1])
    np.testing.assert_array_equal(after[2], before_src[2])
    assert len(c) > 0 and before[0] > 0


def test_alignment_errors_and_warnings(caplog):
    sc, corrs = _aligned_inputs([(1.0, 0.0), (1.0, 0.0)])
    empty = [Correspondence(c.src, c.dst, c.pixel_index[:0], c.p_uv[:0], c.q_uv[:0]) for c in corrs]
    with pytest.raises(ValueError, match="no consistent"):
        align_depths(sc.monodepths, empty, sc.cameras)
    few = [Correspondence(c.src, c.dst, c.pixel_index[:50], c.p_uv[:50], c.q_uv[:50]) for c in corrs]
    align_depths(sc.monodepths, few, sc.cameras, iters=5)
    assert "correspondences" in caplog.text
    with pytest.raises(ValueError):
        align_depths(sc.monodepths[:1], corrs, sc.cameras)


def test_alignment_objective_ends_lower_than_start():
    sc, corrs = _aligned_inputs(synth.random_corruption(3, np.random.default_rng(2)))
    a = align_depths(sc.monodepths, corrs, sc.cameras)
    assert a.history[-1] <= a.history[0]


@pytest.mark.xfail(strict=True, reason="Adam on the L1 objective overshoots the kink at lr 1e-2; the history "
                   "rises by up to ~1e-2 before the cosine decay settles it (see decisions ledger)")
def test_alignment_objective_monotone():
    sc, corrs = _aligned_inputs(synth.random_corruption(3, np.random.default_rng(2)))
    a = align_depths(sc.monodepths, corrs, sc.cameras)
    assert np.diff(a.history).max() <= 1e-6


def test_segmentation_two_planes_exact():
    depth = np.full((16, 16), 2.0)
    depth[:, 10:] = 4.0
    seg = segment_by_depth(depth, 2)
    near = seg.labels[depth == 2.0]
    far = seg.labels[depth == 4.0]
    assert len(set(near)) == 1 and len(set(far)) == 1 and near[0] != far[0]


def test_segmentation_partition_and_default(rng):
    seg = segment_by_depth(rng.uniform(1, 5, (12, 12)))
    assert seg.channels == 5 == TrainConfig().channels
    np.testing.assert_array_equal(seg.onehot().sum(0), 1)
    counts = np.bincount(seg.labels.ravel(), minlength=5)
    assert counts.max() - counts.min() <= 1


def test_segmentation_constant_depth():
    assert not segment_by_depth(np.full((5, 5), 3.0), 4).labels.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.sampled_from(["exp", "sqrt", "affine", "log"]))
def test_segmentation_monotone_invariance(seed, c, kind):
    d = np.random.default_rng(seed).uniform(0.5, 5.0, (9, 9))
    d[2:4, 3:5] = d[0, 0]  # some ties
    t = {"exp": np.exp(d), "sqrt": np.sqrt(d), "affine": 3 * d + 7, "log": np.log1p(d)}[kind]
    np.testing.assert_array_equal(segment_by_depth(d, c).labels, segment_by_depth(t, c).labels)


def test_init_scene_counts_alpha_and_mismatch(rng):
    sc = synth.generate(synth.SynthSpec(n_views=4, width=32, height=32, focal=32.0))
    b = init_scene(sc.images, sc.depths, sc.cameras)
    assert b.num_gaussians == 4 * 32 * 32
    assert all(g.alpha_init == 0.35 for g in b.grids)
    with pytest.raises(ValueError, match="resolution"):
        init_scene(sc.images, [sc.depths[0]] + [d[:16] for d in sc.depths[1:]], sc.cameras)


@pytest.mark.xfail(strict=True, reason="1-px footprints at init opacity 0.5 never reach accum 0.9 in a self render, "
                   "and neighbour blending of the sinusoidal texture alone costs ~0.025 MAE even at alpha 0.9")
def test_source_view_rerender_reproduces_colors():
    sc = synth.generate(synth.SynthSpec())
    b, _ = initialize(sc.images, sc.monodepths, sc.cameras, sc.flows, TrainConfig(align_iters=10))
    with no_grad():
        out = render(b.materialize_view(0), sc.cameras[0], 4)
    mask = out.accum_opacity.data > 0.9
    assert mask.any()
    assert np.abs(out.color.data - sc.images[0])[mask].mean() < 0.02


def test_rerender_of_flat_colors_is_exact():
    # piecewise constant colors isolate the color init from texture blending
    sc = synth.generate(synth.SynthSpec())
    depth = sc.depths[0]
    img = np.where((depth < 3.0)[..., None], [0.75, 0.4, 0.3], [0.3, 0.5, 0.65])
    g = PixelGaussianGrid.create(0, depth, img, 0.9)
    with no_grad():
        out = render(materialize(g, np.zeros_like(depth), np.zeros_like(depth), sc.cameras[0]), sc.cameras[0], 4)
    acc = out.accum_opacity.data
    interior = binary_erosion(depth < 3.0, iterations=3) | binary_erosion(depth > 3.0, iterations=3)
    mask = (acc > 0.9) & interior
    assert mask.mean() > 0.5
    np.testing.assert_allclose(out.color.data[mask] / acc[mask, None], img[mask], atol=1e-9)
