#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

import pytest

from ssfer.config import (
    DataConfig,
    ExperimentsConfig,
    ModelConfig,
    PretrainConfig,
    SemiSupConfig,
    SupervisedConfig,
    TrainConfig,
)
from ssfer.dataset import SynthSpec, synth_generate
from ssfer.pipeline import prepare_data
from ssfer.settings import init_config
from ssfer.training import set_threads


@pytest.fixture(scope='session', autouse=True)
def threads():
    set_threads(init_config().threads)


@pytest.fixture(scope='session')
def desk_config(tmp_path_factory):
    """Desk-scale configuration: 10% labels, five seeds"""
    return TrainConfig(
        seed=0,
        output_dir=str(tmp_path_factory.mktemp('desk')),
        model=ModelConfig(),
        pretrain=PretrainConfig(epochs=10, warmup_epochs=1, batch_size=128,
                                base_lr=1e-3),
        supervised=SupervisedConfig(epochs=5, warmup_epochs=1, batch_size=32),
        semisup=SemiSupConfig(epochs=5, batch_size=32, unlabeled_batch_size=64),
        data=DataConfig(n_train=2000, n_test=500, jitter=0.3,
                        budget_fraction=0.1),
        experiments=ExperimentsConfig(seeds=[0, 1, 2, 3, 4],
                                      epsilons=[0.0, 0.04]),
    )


@pytest.fixture(scope='session')
def desk_split(desk_config):
    return prepare_data(desk_config)


@pytest.fixture(scope='session')
def pretrain_images():
    """500 unlabeled synthetic faces"""
    samples = synth_generate(SynthSpec(n_samples=500, image_size=32, seed=11,
                                       jitter=0.3, patch_size=4))
    return [s.with_label(None) for s in samples]
