#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Full-reference image similarity: PSNR, SSIM and a simplified FSIM

Images are H x W x C arrays (numpy or torch) in [0, 1]. SSIM and FSIM work on
the grayscale channel mean.
"""

import math

import numpy as np
import piq
import torch
import torch.nn.functional as F

from . import constants
from .errors import ConfigError, ShapeMismatchError

METRICS = ('psnr', 'ssim', 'fsim')

_SCHARR = torch.tensor([[3., 0., -3.], [10., 0., -10.], [3., 0., -3.]],
                       dtype=torch.float64) / 16.0


def _as_tensor(image):
    if isinstance(image, torch.Tensor):
        return image.detach().to(torch.float64)
    return torch.as_tensor(np.asarray(image), dtype=torch.float64)


def _pair(x, y):
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ShapeMismatchError(
            f"Images differ in shape: {tuple(x.shape)} vs {tuple(y.shape)}")
    return x, y


def _gray(image):
    """H x W x C -> 1 x 1 x H x W"""
    if image.ndim == 3:
        image = image.mean(dim=2)
    return image[None, None]


def _gaussian_kernel(size, sigma):
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = torch.outer(g, g)
    return (k / k.sum())[None, None]


def _blur(image, sigma):
    size = 2 * math.ceil(3 * sigma) + 1
    pad = size // 2
    padded = F.pad(image, (pad, pad, pad, pad), mode='replicate')
    return F.conv2d(padded, _gaussian_kernel(size, sigma))


def psnr(x, y, cap=constants.PSNR_CAP_DB):
    """Peak signal-to-noise ratio in dB for a peak of 1, capped"""
    x, y = _pair(x, y)
    mse = float(torch.mean((x - y) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def ssim(x, y, window=constants.SSIM_WINDOW, sigma=constants.SSIM_SIGMA):
    """Mean SSIM over valid positions of a Gaussian window

    The window shrinks to the largest odd size fitting a small image.
    """
    x, y = _pair(x, y)
    gx, gy = _gray(x).clamp(0.0, 1.0), _gray(y).clamp(0.0, 1.0)
    size = min(window, gx.shape[-1], gx.shape[-2])
    if size % 2 == 0:
        size -= 1
    value = piq.ssim(gx, gy, kernel_size=size, kernel_sigma=sigma,
                     data_range=1.0, reduction='none', downsample=False,
                     k1=constants.SSIM_K1, k2=constants.SSIM_K2)
    return float(value.mean())


def _gradient_magnitude(gray):
    padded = F.pad(gray, (1, 1, 1, 1), mode='replicate')
    gx = F.conv2d(padded, _SCHARR[None, None])
    gy = F.conv2d(padded, _SCHARR.t()[None, None])
    return torch.sqrt(gx ** 2 + gy ** 2)


def _band_energy(gray):
    """Difference-of-Gaussians magnitude, standing in for phase congruency"""
    return torch.abs(_blur(gray, 1.0) - _blur(gray, 2.0))


def fsim(x, y, t1=constants.FSIM_T1, t2=constants.FSIM_T2):
    """Simplified feature similarity

    Gradient-magnitude similarity weighted by band-pass energy. Falls back to
    the mean gradient similarity when neither image has any band-pass energy.
    """
    x, y = _pair(x, y)
    gx, gy = _gray(x), _gray(y)
    pc_x, pc_y = _band_energy(gx), _band_energy(gy)
    g_x, g_y = _gradient_magnitude(gx), _gradient_magnitude(gy)

    s_pc = (2 * pc_x * pc_y + t1) / (pc_x ** 2 + pc_y ** 2 + t1)
    s_g = (2 * g_x * g_y + t2) / (g_x ** 2 + g_y ** 2 + t2)
    weight = torch.maximum(pc_x, pc_y)
    total = float(weight.sum())
    if total == 0.0:
        return float(s_g.mean())
    return float((s_pc * s_g * weight).sum() / total)


def image_similarity(metric, x, y):
    """Similarity of two images by metric name

    :param str metric: one of psnr, ssim, fsim
    :rtype: float
    :return: PSNR in dB or SSIM/FSIM index
    """
    try:
        func = {'psnr': psnr, 'ssim': ssim, 'fsim': fsim}[metric]
    except KeyError:
        raise ConfigError(f"Unknown similarity metric: {metric}")
    return func(x, y)
