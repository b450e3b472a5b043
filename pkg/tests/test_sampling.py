import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noise2detail.sampling import (
    DIAG_KERNELS,
    pad_to_multiple,
    pair_downsample,
    pair_downsample_t,
    pd_down,
    pd_up,
)
from noise2detail.tensor import ShapeError, Tensor, conv2d, mse

from oracles import central_diff, grads_close


class TestPairDownsample:
    def test_block_identity(self):
        d1, d2 = pair_downsample(np.array([[2.0, 4.0], [6.0, 8.0]]))
        assert d1[0, 0, 0] == 5.0 and d2[0, 0, 0] == 5.0

    def test_block_identity_asymmetric(self):
        d1, d2 = pair_downsample(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert d1[0, 0, 0] == 2.5 and d2[0, 0, 0] == 2.5

    def test_constant_image(self):
        y = np.full((6, 8, 3), 0.3)
        for d in pair_downsample(y):
            assert d.shape == (3, 4, 3)
            np.testing.assert_array_equal(d, 0.3)

    def test_matches_strided_conv(self):
        rng = np.random.default_rng(0)
        y = rng.random((10, 12, 1))
        x = Tensor(y.transpose(2, 0, 1)[None])
        views = pair_downsample(y)
        for view, k in zip(views, DIAG_KERNELS):
            ref = conv2d(x, Tensor(k[None, None]), stride=2).data[0].transpose(1, 2, 0)
            np.testing.assert_allclose(view, ref, rtol=0, atol=1e-15)

    def test_odd_size_reflect(self):
        y = np.arange(15, dtype=np.float64).reshape(3, 5, 1)
        d1, d2 = pair_downsample(y)
        assert d1.shape == (2, 3, 1)
        padded = pad_to_multiple(y, 2)
        # padded row 3 mirrors row 1, padded column 5 mirrors column 3
        np.testing.assert_array_equal(padded[3, :5], y[1])
        np.testing.assert_array_equal(padded[:3, 5], y[:, 3])
        assert d1[1, 2, 0] == 0.5 * (padded[2, 4, 0] + padded[3, 5, 0])

    def test_too_small(self):
        with pytest.raises(ShapeError):
            pair_downsample(np.zeros((1, 4, 1)))

    def test_tensor_version_matches_and_swaps(self):
        rng = np.random.default_rng(1)
        y = rng.random((2, 1, 7, 9))
        d1, d2 = pair_downsample(y[0].transpose(1, 2, 0))
        out = pair_downsample_t(Tensor(y)).data
        np.testing.assert_array_equal(out[0].transpose(1, 2, 0), d1)
        np.testing.assert_array_equal(out[2].transpose(1, 2, 0), d2)
        swapped = pair_downsample_t(Tensor(y), swap=True).data
        np.testing.assert_array_equal(swapped, np.concatenate([out[2:], out[:2]]))

    @pytest.mark.parametrize("h,w", [(6, 8), (7, 9), (5, 4)])
    @pytest.mark.parametrize("swap", [False, True])
    def test_tensor_gradient(self, h, w, swap):
        rng = np.random.default_rng(h * w)
        x = Tensor(rng.random((1, 2, h, w)), requires_grad=True)
        t = Tensor(rng.random(pair_downsample_t(x).shape))
        mse(pair_downsample_t(x, swap), t).backward()
        (num,) = central_diff(lambda: mse(pair_downsample_t(x, swap), t).item(), [x.data])
        assert not grads_close(x.grad, num).any()


class TestPixelShuffle:
    def test_4x4_example(self):
        y = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
        subs, layout = pd_down(y, 2)
        assert subs.shape == (4, 2, 2, 1)
        np.testing.assert_array_equal(subs[0, :, :, 0], [[0, 2], [8, 10]])
        np.testing.assert_array_equal(subs[1, :, :, 0], [[1, 3], [9, 11]])
        np.testing.assert_array_equal(subs[2, :, :, 0], [[4, 6], [12, 14]])
        np.testing.assert_array_equal(subs[3, :, :, 0], [[5, 7], [13, 15]])
        assert layout.offsets == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_sub_images_are_strided_slices(self):
        rng = np.random.default_rng(2)
        y = rng.random((16, 24, 3))
        for s in (2, 4, 8):
            subs, layout = pd_down(y, s)
            for i, (dr, dc) in enumerate(layout.offsets):
                np.testing.assert_array_equal(subs[i], y[dr::s, dc::s])

    def test_roundtrip_200_images(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            s = int(rng.choice([2, 4, 8]))
            h, w = rng.integers(s, 41, size=2)
            c = int(rng.choice([1, 3]))
            y = rng.random((h, w, c)).astype(np.float32)
            subs, layout = pd_down(y, s)
            assert np.array_equal(pd_up(subs, layout), y)

    @settings(max_examples=60, deadline=None)
    @given(st.sampled_from([2, 4, 8]), st.integers(8, 30), st.integers(8, 30), st.integers(0, 2**31))
    def test_roundtrip_property(self, s, h, w, seed):
        y = np.random.default_rng(seed).standard_normal((h, w, 1))
        subs, layout = pd_down(y, s)
        assert subs.shape == (s * s, -(-h // s), -(-w // s), 1)
        assert np.array_equal(pd_up(subs, layout), y)

    def test_permuted_stack_does_not_invert(self):
        rng = np.random.default_rng(4)
        y = rng.random((8, 8, 1))
        subs, layout = pd_down(y, 2)
        out = pd_up(subs[[1, 0, 2, 3]], layout)
        assert not np.array_equal(out, y)

    def test_breaks_neighbour_correlation(self):
        # a smooth random field keeps strong lag-1 correlation; PD_s sub-images see pixels s apart
        rng = np.random.default_rng(5)
        white = rng.standard_normal((256, 256))
        k = np.exp(-0.5 * (np.arange(-6, 7) / 2.0) ** 2)
        field = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 0, white)
        field = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 1, field)

        def lag1(a):
            a = a - a.mean()
            return float((a[:, 1:] * a[:, :-1]).mean() / a.var())

        full = lag1(field)
        subs, _ = pd_down(field[:, :, None], 4)
        sub = np.mean([lag1(s[:, :, 0]) for s in subs])
        assert full > 0.8
        assert sub < full - 0.3

    def test_bad_strides(self):
        y = np.zeros((6, 6, 1))
        with pytest.raises(ValueError):
            pd_down(y, 1)
        with pytest.raises(ValueError):
            pd_down(y, 8)

    def test_layout_mismatch(self):
        subs, layout = pd_down(np.zeros((8, 8, 1)), 2)
        with pytest.raises(ShapeError):
            pd_up(subs[:3], layout)
        with pytest.raises(ShapeError):
            pd_up(subs[:, :1], layout)
