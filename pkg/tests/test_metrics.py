import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from erf.metrics import PSNR_CAP, psnr, ssim


def test_identical_images():
    img = np.random.default_rng(0).random((16, 16, 3))
    assert psnr(img, img) == PSNR_CAP
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_mse_of_one_percent_is_twenty_db():
    a = np.zeros((8, 8, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_constant_offset():
    a = np.full((24, 24, 3), 0.4)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert ssim(a, a + 0.1) < 1.0


def gaussian_ssim(a, b):
    return structural_similarity(a, b, channel_axis=2, data_range=1.0, gaussian_weights=True,
                                 sigma=1.5, use_sample_covariance=False)


@given(st.integers(0, 2 ** 31), st.integers(16, 40), st.floats(0.0, 0.3))
@settings(max_examples=25, deadline=None)
def test_ssim_matches_reference_implementation(seed, size, noise):
    rng = np.random.default_rng(seed)
    a = rng.random((size, size, 3))
    b = np.clip(a + noise * rng.normal(size=a.shape), 0.0, 1.0)
    assert ssim(a, b) == pytest.approx(gaussian_ssim(a, b), abs=1e-6)


def test_ssim_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16, 3)), np.zeros((16, 17, 3)))


@given(st.integers(0, 2 ** 31))
@settings(max_examples=25, deadline=None)
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 20, 20, 3))
    s = ssim(a, b)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
