#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Tests for ssfer.experiments module"""

import json
import os

from flexmock import flexmock
import pytest

from ssfer import experiments, hpo
from ssfer.config import load_config
from ssfer.errors import ConfigError, UnknownExperimentError
from ssfer.experiments import (
    available_experiments,
    final_accuracy,
    run_experiment,
)
from ssfer.pipeline import StageOutcome


def _rows(path):
    with open(path) as f:
        return json.load(f)['rows']


def _summary(path):
    with open(path) as f:
        return json.load(f)['summary']


def test_available():
    assert available_experiments() == [
        'attack', 'components', 'hpo', 'kappa', 'kfold', 'losses',
        'maskratio', 'mixing', 'noise', 'semicompare']


def test_unknown(tiny_config):
    with pytest.raises(UnknownExperimentError) as e:
        run_experiment('cifar', tiny_config)
    assert 'kfold' in e.value.available
    assert e.value.code == 2


def test_final_accuracy():
    outcomes = [StageOutcome('supervised', metrics={'test_accuracy': 0.25}),
                StageOutcome('semisup', metrics={'test_accuracy': 0.75})]
    assert final_accuracy(outcomes) == 0.75
    with pytest.raises(ConfigError):
        final_accuracy([StageOutcome('pretrain', metrics={'final_loss': 1.0})])


class TestMockedCells:
    """Table layout, with the training cells replaced"""

    def test_kfold(self, tiny_config):
        flexmock(experiments).should_receive('train_cell').and_return(
            (0.5, None)).times(3)
        paths = run_experiment('kfold', tiny_config, emit_plots=False)
        assert paths[0] == os.path.join(tiny_config.output_dir, 'kfold',
                                        'kfold.csv')
        [row] = _rows(paths[1])
        assert list(row) == ['Average', 'Fold 1', 'Fold 2', 'Fold 3']
        assert row['Average'] == 0.5

    def test_kfold_csv_column_order(self, tiny_config):
        flexmock(experiments).should_receive('train_cell').and_return(
            (0.5, None))
        paths = run_experiment('kfold', tiny_config, emit_plots=False)
        with open(paths[0]) as f:
            assert f.readline().strip() == 'Fold 1,Fold 2,Fold 3,Average'

    def test_noise(self, tiny_config):
        def cell(config, *args):
            return 0.9 - config.data.noise_ratio, None

        flexmock(experiments).should_receive('train_cell').replace_with(cell)
        paths = run_experiment('noise', tiny_config, emit_plots=False)
        with open(paths[0]) as f:
            assert f.readline().strip() == 'budget,0,10,20,30,Decline'
        [row] = _rows(paths[1])
        assert row['budget'] == 0.5
        assert row['0'] == pytest.approx(0.9)
        assert row['Decline'] == pytest.approx(0.3)

    def test_components(self, tiny_config):
        seen = []

        def cell(config, *args):
            seen.append((config.supervised.mixing,
                         'c' not in config.skip_stages))
            return 0.5, None

        flexmock(experiments).should_receive('train_cell').replace_with(cell)
        paths = run_experiment('components', tiny_config, emit_plots=False)
        rows = _rows(paths[1])
        assert [r['components'] for r in rows] == \
            ['baseline', '+FaceMix', '+EMA', '+both']
        assert seen == [('none', False), ('facemix', False), ('none', True),
                        ('facemix', True)]
        assert set(rows[0]) == {'components', 'seed 0', 'mean', 'std'}

    @pytest.mark.parametrize('name,column,labels', (
        ('mixing', 'mixing', ['none', 'mixup', 'facemix']),
        ('kappa', 'kappa', ['iou', 'psnr', 'ssim', 'fsim']),
        ('losses', 'loss', ['L1', 'L2', 'L3', 'L4']),
    ))
    def test_ablations(self, tiny_config, name, column, labels):
        seen = []

        def cell(config, *args):
            seen.append(config)
            return 0.5, None

        flexmock(experiments).should_receive('train_cell').replace_with(cell)
        paths = run_experiment(name, tiny_config, emit_plots=False)
        assert [r[column] for r in _rows(paths[1])] == labels
        assert all('c' in config.skip_stages for config in seen)

    def test_seeds_are_columns(self, tiny_config, replace_section):
        config = replace_section(tiny_config, 'experiments', seeds=[3, 4])
        flexmock(experiments).should_receive('train_cell').replace_with(
            lambda c, *args: (0.25 if c.seed == 3 else 0.75, None))
        paths = run_experiment('mixing', config, emit_plots=False)
        row = _rows(paths[1])[0]
        assert row['seed 3'] == 0.25
        assert row['seed 4'] == 0.75
        assert row['mean'] == 0.5
        assert row['std'] == 0.25

    def test_semicompare(self, tiny_config):
        def cell(config, *args):
            assert 'c' not in config.skip_stages
            return (0.6 if config.semisup.mode == 'ema_teacher' else 0.5), None

        flexmock(experiments).should_receive('train_cell').replace_with(cell)
        paths = run_experiment('semicompare', tiny_config, emit_plots=False)
        assert _rows(paths[1]) == [{'seed': 0, 'ema_teacher': 0.6,
                                    'fixmatch': 0.5}]
        assert _summary(paths[1])['ema_wins'] == 1


class TestRealCells:

    def test_attack(self, tiny_config):
        config = tiny_config.replace(skip_stages=['a', 'c'])
        paths = run_experiment('attack', config, emit_plots=False)
        rows = _rows(paths[1])
        assert [r['epsilon'] for r in rows] == [0.0, 0.1]
        assert rows[0]['focused'] == rows[0]['clean']

    def test_maskratio(self, tiny_config):
        paths = run_experiment('maskratio', tiny_config, emit_plots=False)
        assert [os.path.basename(p) for p in paths] == \
            ['maskratio.csv', 'maskratio.json']
        assert [r['mask_ratio'] for r in _rows(paths[1])] == [0.5, 0.75]

    def test_hpo(self, tiny_config):
        flexmock(hpo).should_receive('proxy_accuracy').and_return(0.5)
        config = tiny_config.replace(skip_stages=['a'])
        out = os.path.join(config.output_dir, 'search')
        paths = run_experiment('hpo', config, output_dir=out, emit_plots=False)
        assert [os.path.basename(p) for p in paths] == \
            ['hpo.csv', 'hpo.json', 'tuned_config.json']
        assert load_config(paths[2]) == config

    def test_train_cell(self, tiny_config):
        acc, model = experiments.train_cell(
            tiny_config.replace(skip_stages=['a', 'c']))
        assert 0.0 <= acc <= 1.0
        assert model is not None
