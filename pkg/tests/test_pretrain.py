#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Tests for ssfer.pretrain module"""

import os

import numpy as np
import pytest
import torch

from ssfer.augment import AugmentPolicy
from ssfer.checkpoint import load_checkpoint
from ssfer.config import PretrainConfig, derive_seed
from ssfer.errors import ConfigError, DatasetError
from ssfer.model import build_model
from ssfer.pretrain import (
    mae_loss,
    mask_ratio_study,
    recon_loss,
    recon_targets,
    reconstruct,
    run_pretrain,
)


def _states_equal(a, b):
    a, b = a.state_dict(), b.state_dict()
    return all(torch.allclose(a[k], b[k], rtol=0, atol=1e-6) for k in a)


class TestTargets:

    def test_normalized(self):
        patches = torch.tensor([[1.0, 2.0, 3.0, 4.0]])
        expected = torch.tensor([[-1.3416408, -0.4472136, 0.4472136, 1.3416408]])
        assert torch.allclose(recon_targets(patches), expected, atol=1e-6)

    def test_constant_patch(self):
        """Zero variance falls back to the std floor"""
        targets = recon_targets(torch.full((2, 12), 0.5))
        assert torch.equal(targets, torch.zeros(2, 12))

    def test_raw(self):
        patches = torch.rand(4, 12)
        assert recon_targets(patches, normalize=False) is patches

    def test_masked_rows_only(self):
        """Visible rows pass through unchanged, masked rows are standardized"""
        patches = torch.tensor([[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]])
        targets = recon_targets(patches, torch.tensor([True, False]))
        assert torch.allclose(targets[0], recon_targets(patches)[0])
        assert torch.equal(targets[1], patches[1])


class TestReconLoss:

    def test_masked_only(self):
        predicted = torch.zeros(2, 3)
        targets = torch.tensor([[1.0, 1.0, 1.0], [5.0, 5.0, 5.0]])
        assert recon_loss(predicted, targets, [True, False]).item() == 1.0

    def test_batched(self):
        predicted = torch.zeros(2, 2, 1)
        targets = torch.tensor([[[2.0], [0.0]], [[9.0], [4.0]]])
        mask = torch.tensor([[True, False], [False, True]])
        assert recon_loss(predicted, targets, mask).item() == 10.0

    def test_nothing_masked(self):
        with pytest.raises(ConfigError) as e:
            recon_loss(torch.zeros(2, 3), torch.zeros(2, 3), [False, False])
        assert e.value.key == 'pretrain.mask_ratio'


class TestRunPretrain:

    def test_zero_epochs_keeps_init(self, tiny_model_config, synth_samples):
        config = PretrainConfig(epochs=0, warmup_epochs=0, batch_size=4)
        result = run_pretrain(config, tiny_model_config, synth_samples, 5)
        init = build_model(tiny_model_config, derive_seed(5, 'init'))
        assert _states_equal(result.model, init)
        assert result.history == []
        assert result.metrics == {'final_loss': None}

    def test_deterministic(self, tiny_config, synth_samples):
        first = run_pretrain(tiny_config.pretrain, tiny_config.model,
                             synth_samples, 1)
        second = run_pretrain(tiny_config.pretrain, tiny_config.model,
                              synth_samples, 1)
        assert _states_equal(first.model, second.model)
        assert first.history[0]['loss'] == \
            pytest.approx(second.history[0]['loss'])

    def test_training_moves_weights(self, tiny_config, synth_samples):
        result = run_pretrain(tiny_config.pretrain, tiny_config.model,
                              synth_samples, 1)
        init = build_model(tiny_config.model, derive_seed(1, 'init'))
        assert not _states_equal(result.model, init)
        assert np.isfinite(result.metrics['final_loss'])

    def test_outputs(self, tmpdir, tiny_config, synth_samples):
        out = str(tmpdir.join('pretrain'))
        result = run_pretrain(tiny_config.pretrain, tiny_config.model,
                              synth_samples, 0, output_dir=out,
                              policy=AugmentPolicy.weak())
        ckpt = load_checkpoint(result.checkpoints['final'])
        assert ckpt.stage == 'pretrain'
        assert ckpt.epoch == 1
        with open(os.path.join(out, 'log.csv')) as f:
            assert f.readline().strip() == 'epoch,lr,loss'

    def test_no_samples(self, tiny_config):
        with pytest.raises(DatasetError):
            run_pretrain(tiny_config.pretrain, tiny_config.model, [], 0)


def test_mae_gradients(float64_model, gradient_check):
    images = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    gradient_check(float64_model, lambda: mae_loss(
        float64_model, images, 0.75, True, np.random.default_rng(0)))


def test_reconstruct(tiny_model, synth_samples):
    recon, hidden, mse = reconstruct(tiny_model, synth_samples[:3], 0.75,
                                     True, 0)
    assert recon.shape == hidden.shape == (3, 16, 16, 3)
    assert mse.shape == (3,)
    assert (recon >= 0).all() and (recon <= 1).all()


def test_reconstruct_keeps_visible_patches(tiny_model, synth_samples):
    """Only masked patches are replaced by predictions"""
    recon, hidden, _ = reconstruct(tiny_model, synth_samples[:2], 0.5, True, 0)
    for image, masked_input in zip(recon, hidden):
        visible = masked_input != 0.5
        np.testing.assert_allclose(image[visible], masked_input[visible],
                                   atol=1e-6)


def test_mask_ratio_study(tmpdir, tiny_config, synth_samples):
    out = str(tmpdir.join('maskratio'))
    rows = mask_ratio_study([0.5, 0.75], tiny_config, synth_samples, 0,
                            eval_samples=synth_samples[:4], output_dir=out,
                            emit_plots=False)
    assert [r['mask_ratio'] for r in rows] == [0.5, 0.75]
    for row in rows:
        assert row['masked_mse'] >= 0
        assert np.isfinite(row['expression_mse'])
    assert sorted(os.listdir(out)) == ['maskratio.csv', 'maskratio.json']


def test_mask_ratio_study_invalid(tiny_config, synth_samples):
    with pytest.raises(ConfigError) as e:
        mask_ratio_study([0.5, 1.0], tiny_config, synth_samples, 0)
    assert e.value.key == 'experiments.mask_ratios'
