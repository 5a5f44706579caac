#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

import dataclasses

import numpy as np
import pytest
import torch

from ssfer.config import (
    DataConfig,
    ExperimentsConfig,
    ModelConfig,
    PretrainConfig,
    SemiSupConfig,
    SupervisedConfig,
    TrainConfig,
)
from ssfer.dataset import FaceBox, ImageSample, SynthSpec, synth_generate
from ssfer.model import build_model


@pytest.fixture
def tiny_model_config():
    """Smallest ViT the code paths accept"""
    return ModelConfig(image_size=16, patch_size=4, embed_dim=16, depth=1,
                       heads=2, decoder_embed_dim=8, decoder_depth=1,
                       decoder_heads=2, class_count=3)


@pytest.fixture
def tiny_model(tiny_model_config):
    return build_model(tiny_model_config, 0)


@pytest.fixture
def tiny_config(tmpdir, tiny_model_config):
    """TrainConfig running every stage for one short epoch"""
    return TrainConfig(
        seed=0,
        output_dir=str(tmpdir.join('run')),
        model=tiny_model_config,
        pretrain=PretrainConfig(epochs=1, warmup_epochs=0, batch_size=8),
        supervised=SupervisedConfig(epochs=1, warmup_epochs=0, batch_size=4,
                                    small_label_threshold=0),
        semisup=SemiSupConfig(epochs=1, batch_size=4, unlabeled_batch_size=4,
                              steps_per_epoch=2),
        data=DataConfig(n_train=18, n_test=6, class_count=3, image_size=16,
                        jitter=0.2, budget_per_class=2, budget_fraction=None),
        experiments=ExperimentsConfig(seeds=[0], kfold=3,
                                      noise_budgets=[0.5],
                                      epsilons=[0.0, 0.1],
                                      mask_ratios=[0.5, 0.75],
                                      hpo_wolves=4, hpo_iterations=2,
                                      hpo_budget=1),
    )


@pytest.fixture
def synth_samples():
    """Twelve labeled 16x16 synthetic faces, four per class"""
    return synth_generate(SynthSpec(n_samples=12, class_count=3,
                                    image_size=16, jitter=0.2, seed=3,
                                    patch_size=4))


@pytest.fixture
def make_sample():
    """Factory of constant-color samples"""
    def factory(sample_id='s', value=0.5, size=8, label=0, box=None):
        pixels = np.full((size, size, 3), value, dtype=np.float32)
        return ImageSample(id=sample_id, pixels=pixels, label=label,
                           face_box=FaceBox(*box) if box else None)
    return factory


@pytest.fixture
def float64_model(tiny_model_config):
    """Tiny model in double precision for finite differences"""
    model = build_model(tiny_model_config, 1).double()
    model.eval()
    return model


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def replace_section():
    """Copy of a config with fields of one section replaced"""
    def replace(config, name, **fields):
        return config.replace(**{name: dataclasses.replace(
            getattr(config, name), **fields)})
    return replace


@pytest.fixture
def gradient_check():
    """Compare autograd against central differences on sampled entries"""
    def check(model, loss_fn, samples=12, h=1e-4, rtol=1e-3, atol=1e-7,
              seed=0):
        named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        grads = torch.autograd.grad(loss_fn(), [p for _, p in named],
                                    allow_unused=True)
        candidates = [(p, g) for (_, p), g in zip(named, grads) if g is not None]
        rng = np.random.default_rng(seed)
        for k in rng.choice(len(candidates), size=samples):
            p, g = candidates[k]
            i = int(rng.integers(p.numel()))
            flat = p.data.view(-1)
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + h
                plus = loss_fn().item()
                flat[i] = original - h
                minus = loss_fn().item()
                flat[i] = original
            numeric = (plus - minus) / (2 * h)
            assert g.view(-1)[i].item() == pytest.approx(numeric, rel=rtol,
                                                         abs=atol)
    return check
