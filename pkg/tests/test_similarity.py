#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Tests for ssfer.similarity module"""

import numpy as np
import pytest
import torch

from ssfer.errors import ConfigError, ShapeMismatchError
from ssfer.similarity import METRICS, fsim, image_similarity, psnr, ssim


@pytest.fixture
def pair():
    rng = np.random.default_rng(0)
    x = rng.random((16, 16, 3))
    y = np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)
    return x, y


def test_psnr_known_mse():
    x = np.zeros((8, 8, 3))
    y = np.full((8, 8, 3), 0.1)
    assert psnr(x, y) == pytest.approx(20.0, abs=1e-9)


def test_psnr_cap():
    x = np.random.default_rng(1).random((8, 8, 3))
    assert psnr(x, x) == 50.0


@pytest.mark.parametrize('func', (ssim, fsim))
def test_self_similarity(func, pair):
    x, _ = pair
    assert func(x, x) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize('metric', METRICS)
def test_symmetric(metric, pair):
    x, y = pair
    assert image_similarity(metric, x, y) == \
        pytest.approx(image_similarity(metric, y, x), abs=1e-12)


@pytest.mark.parametrize('metric', ('ssim', 'fsim'))
def test_noise_lowers_similarity(metric, pair):
    x, y = pair
    assert image_similarity(metric, x, y) < 1.0


def test_flat_images_fsim_fallback():
    """No band-pass energy anywhere: gradient similarity alone"""
    x = np.full((8, 8, 3), 0.2)
    y = np.full((8, 8, 3), 0.7)
    assert fsim(x, y) == pytest.approx(1.0)


def test_torch_and_numpy_agree(pair):
    x, y = pair
    assert ssim(torch.as_tensor(x), torch.as_tensor(y)) == \
        pytest.approx(ssim(x, y), abs=1e-12)


def test_ssim_small_image():
    """Window shrinks to the image"""
    x = np.random.default_rng(2).random((5, 5, 3))
    assert ssim(x, x) == pytest.approx(1.0)


@pytest.mark.parametrize('metric', METRICS)
def test_shape_mismatch(metric):
    with pytest.raises(ShapeMismatchError):
        image_similarity(metric, np.zeros((8, 8, 3)), np.zeros((8, 6, 3)))


def test_unknown_metric(pair):
    with pytest.raises(ConfigError):
        image_similarity('lpips', *pair)


def _reference_ssim(x, y, size=7, sigma=1.5):
    """Gaussian-window SSIM over valid positions of the grayscale mean"""
    gx = torch.as_tensor(x).mean(dim=2)[None, None]
    gy = torch.as_tensor(y).mean(dim=2)[None, None]
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    kernel = torch.outer(g, g)
    kernel = (kernel / kernel.sum())[None, None]
    conv = torch.nn.functional.conv2d
    mu_x, mu_y = conv(gx, kernel), conv(gy, kernel)
    var_x = conv(gx * gx, kernel) - mu_x ** 2
    var_y = conv(gy * gy, kernel) - mu_y ** 2
    cov = conv(gx * gy, kernel) - mu_x * mu_y
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(ssim_map.mean())


@pytest.mark.parametrize('shape,size', (((16, 16, 3), 7), ((6, 9, 3), 5)))
def test_ssim_window(shape, size):
    """7x7 window with sigma 1.5, shrunk to an odd size on small images"""
    rng = np.random.default_rng(3)
    x = rng.random(shape)
    y = np.clip(x + rng.normal(0, 0.1, shape), 0, 1)
    assert ssim(x, y) == pytest.approx(_reference_ssim(x, y, size), abs=1e-9)
