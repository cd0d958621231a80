import numpy as np
import pytest

from sparsesplat import autodiff as ad
from sparsesplat import decoder as dec
from sparsesplat.autodiff import Tensor
from sparsesplat.gradcheck import directional_check
from sparsesplat.scene import SegMask


def test_capacities_for_three_views():
    assert dec.capacity_for("depth", 3) == 15
    assert dec.capacity_for("opacity", 3) == 10
    assert dec.capacity_for("depth", 2) == 10 and dec.capacity_for("opacity", 4) == 12


def test_architecture_is_function_of_config():
    a = dec.build(32, 48, 3, 5, rng=0)
    b = dec.build(32, 48, 3, 5, rng=99)
    assert a.layer_shapes() == b.layer_shapes()
    assert [k.shape[0] for k in a.kernels] == [24, 12, 6, 3, 5]
    counts = [dec.build(16, 16, c, 5, rng=0).num_parameters for c in (1, 2, 4, 8)]
    assert counts == sorted(counts) and len(set(counts)) == 4


def test_indivisible_resolution_suggests_padding():
    with pytest.raises(ValueError, match="pad"):
        dec.build(30, 32, 2, 5)


def test_decode_shape_and_index_dependence():
    p = dec.build(32, 32, 2, 4, rng=1)
    a, b = dec.decode(p, 0.0).data, dec.decode(p, 1.0).data
    assert a.shape == b.shape == (4, 32, 32)
    assert not np.allclose(a, b)


def test_zero_head_outputs_zero():
    p = dec.build(16, 16, 2, 3, rng=1)
    p.kernels[-1].data[:] = 0
    for n in (0.0, 0.5, 1.0):
        assert not dec.decode(p, n).data.any()


def test_normalized_index():
    assert dec.normalized_index(0, 1) == 0.0
    assert dec.normalized_index(2, 3) == 1.0
    assert dec.normalized_index(1, 5) == 0.25


def test_fresh_output_small_and_smooth():
    rng = np.random.default_rng(0)
    p = dec.build(64, 64, 15, 5, rng=rng)
    for n in (0.0, 0.5, 1.0):
        out = dec.decode(p, n).data
        # scaled by the depth gain (0.1 x range) this stays under 5% of the range
        assert np.abs(out).max() < 0.5
        noise = rng.normal(0, out.std(), out.shape)
        tv = lambda a: np.abs(np.diff(a, axis=1)).mean() + np.abs(np.diff(a, axis=2)).mean()  # noqa: E731
        assert tv(out) * 10 <= tv(noise)


def test_apply_mask_examples(rng):
    r = rng.normal(size=(1, 5, 6))
    np.testing.assert_array_equal(dec.apply_mask(r, SegMask(np.zeros((5, 6), int), 1)).data, r[0])
    labels = rng.integers(0, 3, (5, 6))
    r3 = rng.normal(size=(3, 5, 6))
    seg = SegMask(labels, 3)
    out = dec.apply_mask(r3, seg).data
    np.testing.assert_array_equal(out, np.take_along_axis(r3, labels[None], 0)[0])
    assert out.sum() == pytest.approx((seg.onehot() * r3).sum())


def test_apply_mask_rejects_non_partition():
    s = np.ones((2, 3, 3))
    with pytest.raises(ValueError, match="partition"):
        dec.apply_mask(np.zeros((2, 3, 3)), s)


def test_apply_mask_grad_only_selected_channel(rng):
    labels = rng.integers(0, 3, (4, 4))
    with ad.Tape():
        r = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
        ad.backward(ad.sum_(dec.apply_mask(r, SegMask(labels, 3))))
    np.testing.assert_array_equal(r.grad, SegMask(labels, 3).onehot())


def test_decoder_gradcheck_16x16():
    rng = np.random.default_rng(4)
    p = dec.build(16, 16, 2, 3, rng=rng)
    for b in p.biases:
        b.data[:] = rng.normal(0, 0.05, b.shape)
    nk = len(p.kernels)

    def fn(*arrs):
        q = dec.DecoderParams(16, 16, 2, 3, "depth", list(arrs[:nk]), list(arrs[nk:]))
        return ad.sum_(dec.decode(q, 0.3))

    arrays = [k.data.copy() for k in p.kernels] + [b.data.copy() for b in p.biases]
    assert directional_check(fn, arrays, rng) < 1e-4
