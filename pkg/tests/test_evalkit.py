#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Tests for ssfer.evalkit module"""

import numpy as np
import pytest
import torch

from ssfer.errors import DatasetError
from ssfer.evalkit import (
    SaliencyMap,
    SaliencyProvider,
    attack_experiment,
    evaluate,
    expression_focus_rate,
    fgsm_attack,
    fgsm_batch,
    metrics_from_predictions,
    predict,
    saliency,
)
from ssfer.training import images_tensor, labels_tensor


class HalfSaliency(SaliencyProvider):
    """Left half of every image is focused"""

    def saliency_batch(self, model, images, labels, threshold):
        _, _, height, width = images.shape
        raw = np.zeros((height, width))
        raw[:, :width // 2] = 1.0
        return [SaliencyMap.from_raw(raw, threshold) for _ in range(len(images))]


class TestMetrics:

    def test_confusion(self):
        report = metrics_from_predictions([0, 0, 1, 2], [0, 1, 1, 0], 3)
        assert report.confusion.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 0]]
        assert report.accuracy == 0.5
        assert report.per_class_accuracy.tolist() == [0.5, 1.0, 0.0]
        assert report.count == 4

    def test_absent_class(self):
        report = metrics_from_predictions([0, 1], [0, 0], 3)
        assert report.to_dict()['per_class_accuracy'] == [1.0, 0.0, None]

    def test_empty(self):
        with pytest.raises(DatasetError):
            metrics_from_predictions([], [], 3)


class TestEvaluate:

    def test_uniform_model_predicts_first_class(self, tiny_model,
                                                synth_samples):
        torch.nn.init.zeros_(tiny_model.head.weight)
        torch.nn.init.zeros_(tiny_model.head.bias)
        report = evaluate(tiny_model, synth_samples, 3)
        expected = sum(s.label == 0 for s in synth_samples) / len(synth_samples)
        assert report.accuracy == pytest.approx(expected)
        assert report.confusion[:, 1:].sum() == 0

    def test_batching_irrelevant(self, tiny_model, synth_samples):
        images = images_tensor(synth_samples)
        assert torch.allclose(predict(tiny_model, images, 5),
                              predict(tiny_model, images), atol=1e-6)

    def test_empty(self, tiny_model):
        with pytest.raises(DatasetError):
            evaluate(tiny_model, [], 3)


class TestSaliency:

    def test_from_raw(self):
        smap = SaliencyMap.from_raw([[0.0, 2.0], [4.0, 1.0]])
        assert smap.values.tolist() == [[0.0, 0.5], [1.0, 0.25]]
        assert smap.focused_mask.tolist() == [[False, True], [True, False]]

    def test_flat_map(self):
        smap = SaliencyMap.from_raw(np.zeros((3, 3)))
        assert not smap.focused_mask.any()

    def test_gradient_map(self, tiny_model, synth_samples):
        smap = saliency(tiny_model, synth_samples[0])
        assert smap.values.shape == (16, 16)
        assert smap.values.max() == pytest.approx(1.0)
        assert smap.values.min() >= 0.0

    def test_expression_focus_rate(self, tiny_model, synth_samples):
        assert 0.0 <= expression_focus_rate(tiny_model, synth_samples) <= 1.0

    def test_expression_focus_needs_masks(self, tiny_model, make_sample):
        with pytest.raises(DatasetError):
            expression_focus_rate(tiny_model, [make_sample(size=16)])


class TestFgsm:

    @pytest.fixture
    def batch(self, synth_samples):
        samples = synth_samples[:4]
        return images_tensor(samples), labels_tensor(samples)

    def test_zero_epsilon(self, tiny_model, batch):
        images, labels = batch
        masks = torch.ones(4, 16, 16, dtype=torch.bool)
        assert torch.equal(fgsm_batch(tiny_model, images, labels, 0.0, masks),
                           images)

    @pytest.mark.parametrize('epsilon', (0.02, 0.1))
    def test_bounded(self, tiny_model, batch, epsilon):
        images, labels = batch
        masks = torch.ones(4, 16, 16, dtype=torch.bool)
        adversarial = fgsm_batch(tiny_model, images, labels, epsilon, masks)
        assert (adversarial - images).abs().max() <= epsilon + 1e-6
        assert adversarial.min() >= 0.0 and adversarial.max() <= 1.0

    def test_outside_mask_unchanged(self, tiny_model, batch):
        images, labels = batch
        masks = torch.zeros(4, 16, 16, dtype=torch.bool)
        masks[:, 4:12, 4:12] = True
        adversarial = fgsm_batch(tiny_model, images, labels, 0.1, masks)
        outside = ~masks[:, None].expand_as(images)
        assert torch.equal(adversarial[outside], images[outside])

    def test_negative_epsilon(self, tiny_model, batch):
        images, labels = batch
        with pytest.raises(ValueError):
            fgsm_batch(tiny_model, images, labels, -0.1,
                       torch.ones(4, 16, 16, dtype=torch.bool))

    def test_single_sample(self, tiny_model, synth_samples):
        sample = synth_samples[0]
        adversarial = fgsm_attack(tiny_model, sample, 0.05,
                                  np.ones((16, 16), dtype=bool))
        assert adversarial.shape == sample.pixels.shape
        assert np.abs(adversarial - sample.pixels).max() <= 0.05 + 1e-6


class TestAttackExperiment:

    def test_rows(self, tiny_model, synth_samples):
        rows = attack_experiment(tiny_model, synth_samples, 3,
                                 epsilons=[0.0, 0.1])
        assert [r['epsilon'] for r in rows] == [0.0, 0.1]
        clean = evaluate(tiny_model, synth_samples, 3).accuracy
        assert rows[0]['focused'] == rows[0]['unfocused'] == clean
        for row in rows:
            assert row['clean'] == clean
            assert 0.0 <= row['focused'] <= 1.0

    def test_custom_provider(self, tiny_model, synth_samples):
        rows = attack_experiment(tiny_model, synth_samples, 3, epsilons=[0.1],
                                 provider=HalfSaliency(), batch_size=5)
        assert len(rows) == 1

    def test_empty(self, tiny_model):
        with pytest.raises(DatasetError):
            attack_experiment(tiny_model, [], 3)
