import math

import numpy as np
import pytest

from noise2detail.noise import (
    NoiseSpec,
    add_gaussian,
    add_poisson,
    grid_score,
    lag1_autocorrelation,
    phantom,
    psnr,
)


class TestGaussian:
    def test_statistics(self):
        x = np.full((512, 512, 1), 0.5, np.float32)
        n = add_gaussian(x, 25, seed=0) - x
        assert abs(n.std() - 25 / 255) < 0.002
        assert abs(n.mean()) < 0.001
        assert n.dtype == np.float32

    def test_not_clamped(self):
        y = add_gaussian(np.zeros((64, 64, 1), np.float32), 25, seed=1)
        assert y.min() < 0

    def test_seeded(self):
        x = np.zeros((8, 8, 1), np.float32)
        assert np.array_equal(add_gaussian(x, 10, 3), add_gaussian(x, 10, 3))
        assert not np.array_equal(add_gaussian(x, 10, 3), add_gaussian(x, 10, 4))

    def test_noisy_psnr_near_20db(self):
        x = phantom(256)
        assert 20.0 < psnr(add_gaussian(x, 25, 0), x) < 20.4

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            add_gaussian(np.zeros(3), 0, 0)


class TestPoisson:
    def test_mean_and_variance(self):
        lam, v = 30.0, 0.4
        y = add_poisson(np.full((400, 400), v, np.float32), lam, seed=0)
        assert abs(y.mean() - v) < 0.005
        assert abs(y.var() - v / lam) < 0.001

    def test_quantised(self):
        lam = 10.0
        y = add_poisson(np.full((32, 32), 0.5, np.float32), lam, seed=1)
        np.testing.assert_allclose(y * lam, np.round(y * lam), atol=1e-5)

    def test_negative_input(self):
        with pytest.raises(ValueError):
            add_poisson(np.array([-0.1]), 10, 0)


class TestNoiseSpec:
    def test_fixed_level(self):
        spec = NoiseSpec("gaussian", 25.0)
        assert spec.draw_level(7) == 25.0

    def test_range_level(self):
        spec = NoiseSpec("poisson", (10.0, 50.0), seed=2)
        levels = [spec.draw_level(s) for s in range(50)]
        assert all(10 <= lv < 50 for lv in levels)
        assert len(set(levels)) == 50
        assert spec.draw_level(3) == spec.draw_level(3)

    def test_apply_deterministic(self):
        spec = NoiseSpec("poisson", (10.0, 50.0), seed=1)
        x = phantom(32)
        a, la = spec.apply(x, [1, 0])
        b, lb = spec.apply(x, [1, 0])
        assert la == lb and np.array_equal(a, b)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            NoiseSpec("speckle", 1.0)

    def test_nonpositive_level(self):
        with pytest.raises(ValueError):
            NoiseSpec("gaussian", (0.0, 5.0))


class TestMetrics:
    def test_psnr_identical(self):
        x = np.random.default_rng(0).random((4, 4))
        assert psnr(x, x) == math.inf

    def test_psnr_value(self):
        a = np.zeros((10, 10))
        assert psnr(a, a + 0.1) == pytest.approx(20.0)

    def test_psnr_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_lag1_white_vs_smooth(self):
        rng = np.random.default_rng(0)
        white = rng.standard_normal((128, 128))
        assert abs(lag1_autocorrelation(white)) < 0.05
        ramp = np.add.outer(np.arange(128.0), np.arange(128.0))
        assert lag1_autocorrelation(ramp) > 0.95

    def test_grid_score_detects_period(self):
        rng = np.random.default_rng(1)
        base = rng.standard_normal((64, 64)) * 0.1
        grid = np.zeros((64, 64))
        grid[::4, ::4] = 1.0
        assert grid_score(base + grid, 4) > 0.5
        assert grid_score(base, 4) < 0.1


class TestPhantom:
    def test_range_and_shape(self):
        x = phantom(256)
        assert x.shape == (256, 256, 1) and x.dtype == np.float32
        assert 0.0 <= x.min() and x.max() <= 1.0
        assert x.max() - x.min() > 0.5

    def test_deterministic(self):
        assert np.array_equal(phantom(64, seed=2), phantom(64, seed=2))
        assert not np.array_equal(phantom(64, seed=2), phantom(64, seed=3))
