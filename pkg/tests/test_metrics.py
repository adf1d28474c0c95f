"""
Tests for fidelity measures, perceptual proxies and the weighted utility
"""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from diffcodec.errors import DataError, ShapeMismatchError
from diffcodec.imaging import ImagePlane
from diffcodec.metrics import (CSV_COLUMNS, PSNR_CAP_DB, MetricRegistry, MetricReport, MetricWeights,
                               dists_proxy, evaluate, lpips_proxy, mse, psnr, ssim, utility,
                               utility_from)
from diffcodec.synthetic import pattern_image


def random_pair(seed, size=32):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(size, size, 3))
    y = np.clip(x + rng.normal(scale=0.1, size=x.shape), 0.0, 1.0)
    return x, y


def reference_ssim(x, y):
    """Straight transcription of the SSIM formula with scipy filtering"""
    a, b = x.mean(axis=2), y.mean(axis=2)

    def window(img):
        return gaussian_filter(img, sigma=1.5, truncate=5 / 1.5, mode="reflect")[5:-5, 5:-5]

    mu_a, mu_b = window(a), window(b)
    sigma_a = window(a * a) - mu_a ** 2
    sigma_b = window(b * b) - mu_b ** 2
    sigma_ab = window(a * b) - mu_a * mu_b
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    ratio = ((2 * mu_a * mu_b + c1) * (2 * sigma_ab + c2)
             / ((mu_a ** 2 + mu_b ** 2 + c1) * (sigma_a + sigma_b + c2)))
    return ratio.mean()


class TestFidelity:
    """MSE and PSNR"""

    def test_identical_images(self):
        x, _ = random_pair(0)
        assert mse(x, x) == 0.0
        assert psnr(x, x) == PSNR_CAP_DB

    def test_opposite_extremes(self):
        assert mse(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 1.0
        assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == pytest.approx(0.0)

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(9, 7, 3))
        y = x + rng.uniform(-0.1, 0.1, size=x.shape)
        direct = sum(float(d) ** 2 for d in (x - y).ravel()) / x.size
        assert mse(x, y) == pytest.approx(direct, abs=1e-12)
        assert mse(x, y) == pytest.approx(0.1 ** 2 / 3, rel=0.2)

    def test_accepts_image_planes(self):
        x, y = random_pair(2)
        assert mse(ImagePlane(data=x), ImagePlane(data=y)) == mse(x, y)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            mse(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestSSIM:
    """Single-scale luma SSIM"""

    def test_self_similarity(self):
        x, _ = random_pair(3)
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_anticorrelated_binary_images(self):
        mask = (np.random.default_rng(4).uniform(size=(32, 32, 1)) > 0.5).astype(np.float64)
        x = np.repeat(mask, 3, axis=2)
        assert ssim(x, 1.0 - x) < 0

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_reference_implementation(self, seed):
        x, y = random_pair(10 + seed)
        assert ssim(x, y) == pytest.approx(reference_ssim(x, y), abs=1e-6)

    @pytest.mark.parametrize("shift", [0.0, 0.05, 0.1])
    def test_constant_shift(self, shift):
        x, y = random_pair(5)
        x, y = 0.9 * x, 0.9 * y
        assert ssim(x + shift, y + shift) == pytest.approx(ssim(x, y), abs=1e-3)

    def test_too_small(self):
        with pytest.raises(DataError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


class TestPerceptualProxies:
    """Random-feature and structure/texture distances"""

    @pytest.mark.parametrize("distance", [lpips_proxy, dists_proxy])
    def test_zero_at_identity(self, distance):
        x, _ = random_pair(6)
        assert distance(x, x) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("distance", [lpips_proxy, dists_proxy])
    def test_symmetric_and_non_negative(self, distance):
        x, y = random_pair(7)
        assert distance(x, y) == pytest.approx(distance(y, x), abs=1e-9)
        assert distance(x, y) > 0

    @pytest.mark.parametrize("distance", [lpips_proxy, dists_proxy])
    @pytest.mark.parametrize("shape", [(1, 1), (2, 40), (8, 8), (11, 11)])
    def test_small_images(self, distance, shape):
        rng = np.random.default_rng(11)
        x = rng.uniform(size=shape + (3,))
        y = rng.uniform(size=shape + (3,))
        assert distance(x, x) == pytest.approx(0.0, abs=1e-12)
        value = distance(x, y)
        assert np.isfinite(value) and value >= 0

    def test_blur_scores_worse_than_matched_noise(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            x = pattern_image("checkerboard", 64, 64, rng).data
            blurred = gaussian_filter(x, sigma=(1.5, 1.5, 0))
            noise = rng.standard_normal((64, 64, 1))
            noise *= np.sqrt(mse(x, blurred) / np.mean(noise ** 2))
            noisy = x + noise
            assert mse(x, noisy) == pytest.approx(mse(x, blurred))
            assert dists_proxy(x, blurred) > dists_proxy(x, noisy)


class TestUtility:
    """Weighted combination of the four terms"""

    def test_worked_example(self):
        assert utility_from(0.01, 0.9, 0.3, 0.2) == pytest.approx(-0.16, abs=1e-15)

    def test_doubling_weights_doubles_utility(self):
        doubled = MetricWeights(2.0, 1.0, 0.4, 0.4)
        assert utility_from(0.01, 0.9, 0.3, 0.2, doubled) == pytest.approx(-0.32)

    def test_monotone_in_each_distance(self):
        base = utility_from(0.01, 0.9, 0.3, 0.2)
        assert utility_from(0.02, 0.9, 0.3, 0.2) < base
        assert utility_from(0.01, 0.8, 0.3, 0.2) < base
        assert utility_from(0.01, 0.9, 0.4, 0.2) < base
        assert utility_from(0.01, 0.9, 0.3, 0.3) < base

    def test_identical_images_have_zero_utility(self):
        x, _ = random_pair(8)
        report = evaluate(x, x)
        assert report.utility == pytest.approx(0.0, abs=1e-12)
        assert report.ssim == pytest.approx(1.0)

    def test_smallest_scorable_image(self):
        x, _ = random_pair(12, size=11)
        assert evaluate(x, x).utility == pytest.approx(0.0, abs=1e-12)
        y = np.clip(x + 0.05, 0.0, 1.0)
        assert np.isfinite(evaluate(x, y).utility)

    def test_below_ssim_window_is_data_error(self):
        x, _ = random_pair(13, size=8)
        with pytest.raises(DataError):
            evaluate(x, x)

    def test_report_row_order(self):
        report = MetricReport(mse=1, psnr_db=2, ssim=3, lpips_proxy=4, dists_proxy=5, utility=6)
        assert CSV_COLUMNS == ("mse", "psnr_db", "ssim", "lpips_proxy", "dists_proxy", "utility")
        assert report.to_row() == [1, 2, 3, 4, 5, 6]

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            MetricWeights(lpips=-0.1)


class TestMetricRegistry:
    """Pluggable perceptual distances"""

    def test_builtins(self):
        registry = MetricRegistry()
        assert set(registry.list_metrics()) == {"lpips-proxy", "dists-proxy"}
        assert registry.get_metric("vgg") is None

    def test_custom_metric_feeds_utility(self):
        registry = MetricRegistry()
        registry.register("constant", lambda x, y: 0.5, description="test double")
        x, y = random_pair(9)
        report = evaluate(x, y, perceptual=("constant", "constant"), registry=registry)
        assert report.lpips_proxy == 0.5 and report.dists_proxy == 0.5
        assert report.utility == pytest.approx(
            utility_from(report.mse, report.ssim, 0.5, 0.5))
        assert utility(x, y, perceptual=("constant", "constant"), registry=registry) == report.utility

    def test_unknown_metric(self):
        x, y = random_pair(9)
        with pytest.raises(KeyError):
            evaluate(x, y, perceptual=("lpips-proxy", "vgg"))
