#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Weak/strong views, Mixup/FaceMix mixing, box overlap and kappa"""

from dataclasses import dataclass, field
import logging
import math
from typing import Any, Tuple

import numpy as np
import torch
from torchvision.transforms import InterpolationMode
import torchvision.transforms.functional as TF

from . import constants
from .errors import ConfigError, ShapeMismatchError
from .similarity import image_similarity

logger = logging.getLogger(__name__)

RANDAUGMENT_OPS = (
    'rotate', 'translate_x', 'translate_y', 'shear_x', 'shear_y',
    'brightness', 'contrast', 'invert_lite', 'posterize_approx',
)

# op amplitude at magnitude 10
_MAX_ROTATE_DEG = 30.0
_MAX_TRANSLATE = 0.3
_MAX_SHEAR_DEG = 17.0
_MAX_ENHANCE = 0.9
_MAX_INVERT = 0.3
_MAX_POSTERIZE_BITS = 4


@dataclass(frozen=True)
class AugmentPolicy:
    kind: str = 'weak'
    crop_scale_range: Tuple[float, float] = constants.DEFAULT_CROP_SCALE
    flip_prob: float = constants.DEFAULT_FLIP_PROB
    randaugment_ops: int = 0
    randaugment_magnitude: int = constants.DEFAULT_RANDAUGMENT_MAGNITUDE

    def __post_init__(self):
        if self.kind not in ('weak', 'strong'):
            raise ConfigError(f"Unknown augmentation kind: {self.kind}",
                              key='augment.kind')
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(
                f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got "
                f"{self.crop_scale_range}", key='augment.crop_scale_range')
        if self.kind == 'weak' and self.randaugment_ops:
            raise ConfigError("weak policy can't include RandAugment ops",
                              key='augment.weak.randaugment_ops')
        if not 0 <= self.randaugment_magnitude <= 10:
            raise ConfigError("randaugment_magnitude must lie in [0, 10]",
                              key='augment.randaugment_magnitude')

    @classmethod
    def weak(cls):
        return cls(kind='weak')

    @classmethod
    def strong(cls):
        return cls(kind='strong',
                   randaugment_ops=constants.DEFAULT_RANDAUGMENT_OPS)


def _crop_params(rng, height, width, scale, ratio=constants.CROP_RATIO_RANGE):
    """Random resized crop box (top, left, h, w) for the given scale range"""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target_area = area * rng.uniform(scale[0], scale[1])
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # central crop fallback
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def _randaugment(img, op, level, sign):
    """Apply one RandAugment op with signed strength level in [0, 1]"""
    _, height, width = img.shape
    fill = [constants.GEOMETRIC_FILL] * img.shape[0]
    bilinear = InterpolationMode.BILINEAR
    if op == 'rotate':
        return TF.rotate(img, sign * level * _MAX_ROTATE_DEG,
                         interpolation=bilinear, fill=fill)
    if op in ('translate_x', 'translate_y'):
        dx = int(round(sign * level * _MAX_TRANSLATE * width))
        dy = int(round(sign * level * _MAX_TRANSLATE * height))
        shift = [dx, 0] if op == 'translate_x' else [0, dy]
        return TF.affine(img, angle=0.0, translate=shift, scale=1.0,
                         shear=[0.0, 0.0], interpolation=bilinear, fill=fill)
    if op in ('shear_x', 'shear_y'):
        deg = sign * level * _MAX_SHEAR_DEG
        shear = [deg, 0.0] if op == 'shear_x' else [0.0, deg]
        return TF.affine(img, angle=0.0, translate=[0, 0], scale=1.0,
                         shear=shear, interpolation=bilinear, fill=fill)
    if op == 'brightness':
        return TF.adjust_brightness(img, 1.0 + sign * level * _MAX_ENHANCE)
    if op == 'contrast':
        return TF.adjust_contrast(img, 1.0 + sign * level * _MAX_ENHANCE)
    if op == 'invert_lite':
        beta = level * _MAX_INVERT
        return (1.0 - beta) * img + beta * (1.0 - img)
    if op == 'posterize_approx':
        bits = 8 - int(round(level * _MAX_POSTERIZE_BITS))
        levels = 2 ** bits - 1
        return torch.floor(img * levels + 0.5) / levels
    raise ConfigError(f"Unknown RandAugment op: {op}")


def augment_tensor(policy, img, rng):
    """Augment a C x H x W tensor in place of a sample view"""
    _, height, width = img.shape
    top, left, h, w = _crop_params(rng, height, width, policy.crop_scale_range)
    if (h, w) != (height, width):
        img = TF.resized_crop(img, top, left, h, w, [height, width],
                              interpolation=InterpolationMode.BILINEAR,
                              antialias=True)
    if rng.random() < policy.flip_prob:
        img = TF.hflip(img)
    if policy.kind == 'strong':
        level = policy.randaugment_magnitude / 10.0
        for _ in range(policy.randaugment_ops):
            op = RANDAUGMENT_OPS[int(rng.integers(len(RANDAUGMENT_OPS)))]
            sign = 1.0 if rng.random() < 0.5 else -1.0
            img = _randaugment(img, op, level, sign)
    return img.clamp(0.0, 1.0)


def apply_augment(policy, image, seed):
    """Weak or strong view of an H x W x C image in [0, 1]

    :param AugmentPolicy policy: what to apply
    :param image: numpy H x W x C array
    :param seed: int or numpy Generator
    :rtype: numpy.ndarray
    """
    rng = np.random.default_rng(seed)
    img = torch.as_tensor(np.ascontiguousarray(image),
                          dtype=torch.float32).permute(2, 0, 1)
    out = augment_tensor(policy, img, rng)
    return out.permute(1, 2, 0).contiguous().numpy()


def augment_views(policy, samples, seed):
    """Stack augmented views of samples into a B x C x H x W tensor"""
    rng = np.random.default_rng(seed)
    views = []
    for s in samples:
        img = torch.as_tensor(s.pixels, dtype=torch.float32).permute(2, 0, 1)
        views.append(augment_tensor(policy, img, rng))
    return torch.stack(views)


#
# mixing
#

def one_hot(label, class_count):
    y = np.zeros(class_count, dtype=np.float64)
    y[label] = 1.0
    return y


def sample_lambda(alpha, seed, size=None):
    """Mixing coefficient(s) drawn from Beta(alpha, alpha)

    :param seed: int or numpy Generator (drawn from in place)
    """
    if alpha <= 0:
        raise ConfigError(f"Beta alpha must be positive, got {alpha}",
                          key='supervised.alpha')
    rng = np.random.default_rng(seed)
    draws = rng.beta(alpha, alpha, size=size)
    return float(draws) if size is None else draws


def mix_images(x_i, y_i, x_j, y_j, lam):
    """Convex combination of two images and their (soft) labels

    Works on numpy arrays and torch tensors alike.
    """
    if tuple(x_i.shape) != tuple(x_j.shape):
        raise ShapeMismatchError(
            f"Images differ in shape: {tuple(x_i.shape)} vs {tuple(x_j.shape)}")
    if tuple(y_i.shape) != tuple(y_j.shape):
        raise ShapeMismatchError(
            f"Labels differ in shape: {tuple(y_i.shape)} vs {tuple(y_j.shape)}")
    x_mixed = lam * x_i + (1.0 - lam) * x_j
    y_mixed = lam * y_i + (1.0 - lam) * y_j
    return x_mixed, y_mixed


def iou(b_i, b_j):
    """Intersection over union of two face boxes"""
    ix = max(0.0, min(b_i.x1, b_j.x1) - max(b_i.x0, b_j.x0))
    iy = max(0.0, min(b_i.y1, b_j.y1) - max(b_i.y0, b_j.y0))
    inter = ix * iy
    union = b_i.area + b_j.area - inter
    return inter / union


def kappa(x_i, x_j, metric, box_provider=None):
    """Dissimilarity weight of a pair of samples, in [0, 1]

    ``iou`` compares the face boxes (1 - IoU); the image metrics map PSNR,
    SSIM and FSIM onto [0, 1] so that identical images give 0.

    :param ImageSample x_i: first sample
    :param ImageSample x_j: second sample
    :param str metric: iou, psnr, ssim or fsim
    :param BoxProvider box_provider: needed by the iou metric
    :rtype: float
    """
    if metric == 'iou':
        if box_provider is None:
            raise ConfigError("kappa metric iou needs a box provider")
        value = 1.0 - iou(box_provider.box(x_i), box_provider.box(x_j))
    elif metric == 'psnr':
        value = 1.0 - min(1.0, image_similarity('psnr', x_i.pixels, x_j.pixels)
                          / constants.PSNR_CAP_DB)
    elif metric == 'ssim':
        value = 1.0 - max(0.0, image_similarity('ssim', x_i.pixels, x_j.pixels))
    elif metric == 'fsim':
        value = 1.0 - image_similarity('fsim', x_i.pixels, x_j.pixels)
    else:
        raise ConfigError(f"Unknown kappa metric: {metric}")
    return min(1.0, max(0.0, value))


@dataclass
class MixPair:
    x_i: Any
    x_j: Any
    lam: float
    kappa: float
    x_mixed: Any = field(repr=False)
    y_mixed: Any = field(repr=False)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda outside [0, 1]: {self.lam}")
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError(f"kappa outside [0, 1]: {self.kappa}")
        y = np.asarray(self.y_mixed, dtype=np.float64)
        if (y < 0).any() or abs(float(y.sum()) - 1.0) > 1e-6:
            raise ConfigError("mixed label is not a probability vector")


def make_mix_pair(x_i, x_j, class_count, lam, kappa_value, views=None):
    """Mix two labeled samples into a MixPair

    :param tuple views: (view of x_i, view of x_j) to mix instead of the raw
        pixels; torch views get torch soft labels of the same dtype
    """
    view_i, view_j = views if views is not None else (x_i.pixels, x_j.pixels)
    y_i = one_hot(x_i.label, class_count)
    y_j = one_hot(x_j.label, class_count)
    if torch.is_tensor(view_i):
        y_i = torch.as_tensor(y_i, dtype=view_i.dtype)
        y_j = torch.as_tensor(y_j, dtype=view_i.dtype)
    x_mixed, y_mixed = mix_images(view_i, y_i, view_j, y_j, lam)
    return MixPair(x_i=x_i, x_j=x_j, lam=lam, kappa=kappa_value,
                   x_mixed=x_mixed, y_mixed=y_mixed)
