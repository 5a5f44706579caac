#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Tests for ssfer.augment module"""

import numpy as np
import pytest
import torch

from ssfer.augment import (
    RANDAUGMENT_OPS,
    AugmentPolicy,
    _randaugment,
    apply_augment,
    augment_views,
    iou,
    kappa,
    make_mix_pair,
    mix_images,
    one_hot,
    sample_lambda,
)
from ssfer.dataset import FaceBox, FullImageBoxProvider, StoredBoxProvider
from ssfer.errors import ConfigError, ShapeMismatchError


@pytest.fixture
def image():
    return np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)


class TestApplyAugment:

    def test_identity_policy(self, image):
        """Full-frame crop and no flip leave the image alone"""
        policy = AugmentPolicy(kind='weak', crop_scale_range=(1.0, 1.0),
                               flip_prob=0.0)
        for seed in range(5):
            np.testing.assert_array_equal(apply_augment(policy, image, seed),
                                          image)

    def test_flip_only(self, image):
        policy = AugmentPolicy(kind='weak', crop_scale_range=(1.0, 1.0),
                               flip_prob=1.0)
        np.testing.assert_array_equal(apply_augment(policy, image, 0),
                                      image[:, ::-1])

    @pytest.mark.parametrize('policy', (AugmentPolicy.weak(),
                                        AugmentPolicy.strong()))
    def test_deterministic(self, policy, image):
        np.testing.assert_array_equal(apply_augment(policy, image, 42),
                                      apply_augment(policy, image, 42))

    def test_strong_shape_and_range(self):
        rng = np.random.default_rng(1)
        policy = AugmentPolicy.strong()
        for i in range(50):
            img = rng.random((16, 16, 3)).astype(np.float32)
            out = apply_augment(policy, img, i)
            assert out.shape == img.shape
            assert out.min() >= 0.0 and out.max() <= 1.0

    @pytest.mark.parametrize('op', RANDAUGMENT_OPS)
    @pytest.mark.parametrize('sign', (1.0, -1.0))
    def test_every_op_keeps_shape(self, op, sign):
        img = torch.rand(3, 16, 16)
        out = _randaugment(img, op, 0.9, sign)
        assert out.shape == img.shape

    def test_unknown_op(self):
        with pytest.raises(ConfigError):
            _randaugment(torch.rand(3, 8, 8), 'solarize', 0.5, 1.0)

    def test_views(self, synth_samples):
        views = augment_views(AugmentPolicy.weak(), synth_samples[:4], 0)
        assert views.shape == (4, 3, 16, 16)
        assert views.dtype == torch.float32


@pytest.mark.parametrize('kwargs', (
    {'kind': 'medium'},
    {'crop_scale_range': (0.0, 1.0)},
    {'crop_scale_range': (0.9, 0.8)},
    {'kind': 'weak', 'randaugment_ops': 2},
    {'kind': 'strong', 'randaugment_magnitude': 11},
))
def test_invalid_policy(kwargs):
    with pytest.raises(ConfigError):
        AugmentPolicy(**kwargs)


class TestMixImages:

    def test_lambda_one(self, image):
        y_i, y_j = one_hot(0, 3), one_hot(2, 3)
        x, y = mix_images(image, y_i, 1 - image, y_j, 1.0)
        np.testing.assert_array_equal(x, image)
        np.testing.assert_array_equal(y, y_i)

    def test_half(self, image):
        _, y = mix_images(image, one_hot(1, 3), image, one_hot(2, 3), 0.5)
        np.testing.assert_allclose(y, [0.0, 0.5, 0.5])

    def test_random_lambda(self, image):
        lam = sample_lambda(0.2, 3)
        _, y = mix_images(image, one_hot(0, 4), image, one_hot(3, 4), lam)
        assert y.sum() == pytest.approx(1.0, abs=1e-6)
        assert sorted(y[[0, 3]]) == sorted([lam, 1 - lam])

    def test_symmetry(self, image):
        other = 1 - image
        y_i, y_j = one_hot(0, 3), one_hot(1, 3)
        x1, y1 = mix_images(image, y_i, other, y_j, 0.3)
        x2, y2 = mix_images(other, y_j, image, y_i, 0.7)
        np.testing.assert_allclose(x1, x2, atol=1e-6)
        np.testing.assert_allclose(y1, y2, atol=1e-12)

    def test_shape_mismatch(self, image):
        with pytest.raises(ShapeMismatchError):
            mix_images(image, one_hot(0, 3), image[:8], one_hot(1, 3), 0.5)

    def test_mix_pair(self, synth_samples):
        pair = make_mix_pair(synth_samples[0], synth_samples[1], 3, 0.25, 0.5)
        assert pair.y_mixed.sum() == pytest.approx(1.0)
        assert pair.x_mixed.shape == synth_samples[0].pixels.shape
        with pytest.raises(ValueError):
            make_mix_pair(synth_samples[0], synth_samples[1], 3, 1.5, 0.5)


class TestSampleLambda:

    def test_concentrated(self):
        draws = sample_lambda(200, 0, size=100000)
        assert draws.mean() == pytest.approx(0.5, abs=0.01)

    def test_uniform(self):
        draws = sample_lambda(1.0, 1, size=100000)
        assert np.mean(draws <= 0.5) == pytest.approx(0.5, abs=0.01)

    @pytest.mark.parametrize('seed', range(10))
    def test_support(self, seed):
        assert 0.0 <= sample_lambda(0.2, seed) <= 1.0

    def test_invalid_alpha(self):
        with pytest.raises(ConfigError):
            sample_lambda(0.0, 0)


class TestIou:

    def test_overlap(self):
        assert iou(FaceBox(0, 0, 2, 2), FaceBox(1, 1, 3, 3)) == \
            pytest.approx(1 / 7)

    def test_disjoint(self):
        assert iou(FaceBox(0, 0, 2, 2), FaceBox(2, 2, 4, 4)) == 0.0

    def test_equal(self):
        assert iou(FaceBox(1, 2, 5, 7), FaceBox(1, 2, 5, 7)) == 1.0

    def test_symmetric(self):
        a, b = FaceBox(0, 0, 5, 3), FaceBox(2, 1, 6, 6)
        assert iou(a, b) == iou(b, a)


class TestKappa:

    def test_iou_example(self, make_sample):
        x_i = make_sample('a', box=(0, 0, 2, 2))
        x_j = make_sample('b', box=(1, 1, 3, 3))
        assert kappa(x_i, x_j, 'iou', StoredBoxProvider()) == \
            pytest.approx(6 / 7)

    @pytest.mark.parametrize('metric', ('iou', 'psnr', 'ssim', 'fsim'))
    def test_identical_zero(self, metric, synth_samples):
        x = synth_samples[0]
        assert kappa(x, x, metric, StoredBoxProvider()) == \
            pytest.approx(0.0, abs=1e-9)

    def test_psnr_closed_form(self, make_sample):
        """A uniform 0.1 offset has MSE 0.01, i.e. 20 dB"""
        x_i = make_sample('a', value=0.5)
        x_j = make_sample('b', value=0.6)
        assert kappa(x_i, x_j, 'psnr') == pytest.approx(1 - 20 / 50, abs=1e-6)

    def test_overlap_monotonic(self, make_sample):
        provider = StoredBoxProvider()
        base = make_sample('a', size=16, box=(0, 0, 8, 8))
        values = [kappa(base, make_sample('b', size=16, box=(d, d, 8 + d, 8 + d)),
                        'iou', provider) for d in range(0, 9, 2)]
        assert values == sorted(values)
        assert values[-1] == 1.0

    def test_full_image_boxes(self, synth_samples):
        assert kappa(synth_samples[0], synth_samples[1], 'iou',
                     FullImageBoxProvider()) == 0.0

    @pytest.mark.parametrize('metric', ('psnr', 'ssim', 'fsim'))
    def test_range(self, metric, synth_samples):
        value = kappa(synth_samples[0], synth_samples[5], metric)
        assert 0.0 <= value <= 1.0

    def test_iou_needs_provider(self, synth_samples):
        with pytest.raises(ConfigError):
            kappa(synth_samples[0], synth_samples[1], 'iou')

    def test_unknown_metric(self, synth_samples):
        with pytest.raises(ConfigError):
            kappa(synth_samples[0], synth_samples[1], 'lpips')


def test_iou_pixel_oracle():
    """Random boxes on a 64x64 grid agree with pixel membership counting"""
    rng = np.random.default_rng(0)

    def random_box():
        x0, x1 = sorted(rng.choice(65, size=2, replace=False))
        y0, y1 = sorted(rng.choice(65, size=2, replace=False))
        return FaceBox(int(x0), int(y0), int(x1), int(y1))

    def pixels(box):
        grid = np.zeros((64, 64), dtype=bool)
        grid[box.y0:box.y1, box.x0:box.x1] = True
        return grid

    for _ in range(1000):
        a, b = random_box(), random_box()
        pa, pb = pixels(a), pixels(b)
        expected = (pa & pb).sum() / (pa | pb).sum()
        assert iou(a, b) == pytest.approx(expected, rel=1e-12, abs=0)
