#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Experiment runners: cross validation, label noise, FGSM, ablations, HPO

Each runner loops over its cells (seeds, folds, ratios, variants), trains
in memory and writes one table as CSV, JSON and PNG into the experiment
directory.
"""

import dataclasses
import logging
import os

import numpy as np

from . import constants
from .checkpoint import checkpoint_from_model
from .config import derive_seed, save_config
from .dataset import kfold_split, make_box_provider
from .errors import ConfigError, UnknownExperimentError
from .evalkit import attack_experiment
from .hpo import lr_search
from .pipeline import build_split, load_samples, prepare_data, run_stages
from .pretrain import mask_ratio_study
from .reports import plot_bars, plot_lines, write_table

logger = logging.getLogger(__name__)

EXPERIMENTS = {}


def experiment(name):
    """Register an experiment runner under name"""
    def decorator(f):
        EXPERIMENTS[name] = f
        return f
    return decorator


def available_experiments():
    return sorted(EXPERIMENTS)


def _without_stage(config, stage):
    return config.replace(
        skip_stages=sorted(set(config.skip_stages) | {stage}))


def _with_stage(config, stage):
    return config.replace(
        skip_stages=[s for s in config.skip_stages if s != stage])


def final_accuracy(outcomes):
    """Test accuracy of the last stage that was evaluated"""
    for outcome in reversed(outcomes):
        if 'test_accuracy' in outcome.metrics:
            return outcome.metrics['test_accuracy']
    raise ConfigError("Experiment cells need stage b or c to run",
                      key='skip_stages')


def train_cell(config, split=None, box_provider=None):
    """Accuracy and model of one in-memory run of the configured stages"""
    if split is None:
        split, box_provider = prepare_data(config)
    outcomes, model = run_stages(config, split, box_provider)
    return final_accuracy(outcomes), model


def _seed_columns(seeds):
    return [f'seed {s}' for s in seeds]


def ablation(config, column, variants):
    """One row per variant with the accuracy of every seed and the mean

    :param list variants: (label, TrainConfig transform) pairs
    """
    seeds = config.experiments.seeds
    rows = []
    for label, transform in variants:
        row = {column: label}
        accuracies = []
        for seed, key in zip(seeds, _seed_columns(seeds)):
            acc, _ = train_cell(transform(config.replace(seed=seed)))
            row[key] = acc
            accuracies.append(acc)
        row['mean'] = float(np.mean(accuracies))
        row['std'] = float(np.std(accuracies))
        logger.info("%s %s: mean accuracy %.4f", column, label, row['mean'])
        rows.append(row)
    return rows


def _bar_plot(column, title):
    def plot(path, rows):
        return plot_bars(path, [str(r[column]) for r in rows],
                         [r['mean'] for r in rows], 'accuracy', title)
    return plot


def _supervised(config, **fields):
    return dataclasses.replace(config.supervised, **fields)


@experiment('kfold')
def kfold(config, output_dir, emit_plots=True):
    """K-fold cross validation over the training samples"""
    k = config.experiments.kfold
    train, _ = load_samples(config)
    provider = make_box_provider(config.data.box_provider,
                                 config.data.sidecar_path)
    row = {}
    for i, (fold_train, fold_val) in enumerate(
            kfold_split(train, k, derive_seed(config.seed, 'kfold'))):
        split = build_split(config, fold_train, fold_val)
        acc, _ = train_cell(config, split, provider)
        row[f'Fold {i + 1}'] = acc
        logger.info("Fold %d/%d: accuracy %.4f", i + 1, k, acc)
    row['Average'] = float(np.mean(list(row.values())))

    def plot(path, rows):
        labels = list(rows[0])
        return plot_bars(path, labels, [rows[0][c] for c in labels],
                         'accuracy', f'{k}-fold validation')
    return write_table(output_dir, 'kfold', [row], plot=plot,
                       emit_plots=emit_plots)


def _percent(ratio):
    return f'{ratio * 100:g}'


@experiment('noise')
def noise(config, output_dir, emit_plots=True):
    """Accuracy under symmetric label noise for every label budget"""
    ratios = config.experiments.noise_ratios
    seeds = config.experiments.seeds
    rows = []
    for budget in config.experiments.noise_budgets:
        row = {'budget': budget}
        for ratio in ratios:
            data = dataclasses.replace(config.data, budget_per_class=None,
                                       budget_fraction=budget,
                                       noise_ratio=ratio)
            row[_percent(ratio)] = float(np.mean([
                train_cell(config.replace(seed=seed, data=data))[0]
                for seed in seeds]))
        row['Decline'] = row[_percent(ratios[0])] - row[_percent(ratios[-1])]
        logger.info("Label budget %g: decline %.4f", budget, row['Decline'])
        rows.append(row)

    def plot(path, rows):
        return plot_lines(path, [100 * r for r in ratios],
                          {f"budget {r['budget']:g}": [r[_percent(x)] for x in ratios]
                           for r in rows},
                          'label noise (%)', 'accuracy', 'Label noise')
    return write_table(output_dir, 'noise', rows, plot=plot,
                       emit_plots=emit_plots)


@experiment('attack')
def attack(config, output_dir, emit_plots=True):
    """FGSM restricted to focused and unfocused saliency regions"""
    split, provider = prepare_data(config)
    _, model = train_cell(config, split, provider)
    rows = attack_experiment(model, split.test, config.model.class_count,
                             config.experiments.epsilons,
                             config.experiments.saliency_threshold)

    def plot(path, rows):
        eps = [r['epsilon'] for r in rows]
        return plot_lines(path, eps,
                          {region: [r[region] for r in rows]
                           for region in ('focused', 'unfocused', 'clean')},
                          'epsilon', 'accuracy', 'FGSM by region')
    summary = {'focused_mean': float(np.mean([r['focused'] for r in rows])),
               'unfocused_mean': float(np.mean([r['unfocused'] for r in rows]))}
    return write_table(output_dir, 'attack', rows, summary=summary, plot=plot,
                       emit_plots=emit_plots)


@experiment('maskratio')
def maskratio(config, output_dir, emit_plots=True):
    """Pretraining reconstruction quality across mask ratios"""
    train, test = load_samples(config)
    images = [s.with_label(None) for s in train]
    mask_ratio_study(config.experiments.mask_ratios, config, images,
                     derive_seed(config.seed, 'maskratio'),
                     eval_samples=test[:constants.MASK_STUDY_SAMPLES],
                     output_dir=output_dir, emit_plots=emit_plots)
    return [os.path.join(output_dir, f) for f in sorted(os.listdir(output_dir))]


@experiment('hpo')
def hpo(config, output_dir, emit_plots=True):
    """GWO search of the fine-tuning learning rates"""
    split, provider = prepare_data(config)
    checkpoint = None
    if 'a' not in config.skip_stages:
        _, model = run_stages(config.replace(skip_stages=['b', 'c']), split,
                              provider)
        checkpoint = checkpoint_from_model(model, 'pretrain')
    tuned = lr_search(config, split, config.experiments.hpo_budget,
                      checkpoint, provider, output_dir, emit_plots)
    path = os.path.join(output_dir, 'tuned_config.json')
    save_config(tuned, path)
    return [os.path.join(output_dir, f) for f in sorted(os.listdir(output_dir))]


@experiment('semicompare')
def semicompare(config, output_dir, emit_plots=True):
    """EMA teacher against FixMatch self-labeling, seed by seed"""
    config = _with_stage(config, 'c')
    rows = []
    for seed in config.experiments.seeds:
        row = {'seed': seed}
        for mode in ('ema_teacher', 'fixmatch'):
            semisup = dataclasses.replace(config.semisup, mode=mode)
            row[mode], _ = train_cell(config.replace(seed=seed, semisup=semisup))
        logger.info("seed %d: ema_teacher %.4f, fixmatch %.4f", seed,
                    row['ema_teacher'], row['fixmatch'])
        rows.append(row)
    summary = {mode: float(np.mean([r[mode] for r in rows]))
               for mode in ('ema_teacher', 'fixmatch')}
    summary['ema_wins'] = sum(r['ema_teacher'] >= r['fixmatch'] for r in rows)

    def plot(path, rows):
        return plot_lines(path, [r['seed'] for r in rows],
                          {mode: [r[mode] for r in rows]
                           for mode in ('ema_teacher', 'fixmatch')},
                          'seed', 'accuracy', 'EMA teacher vs FixMatch')
    return write_table(output_dir, 'semicompare', rows, summary=summary,
                       plot=plot, emit_plots=emit_plots)


@experiment('components')
def components(config, output_dir, emit_plots=True):
    """Baseline, +FaceMix, +EMA and both, on top of the same pretraining"""
    def variant(mixing, semisup):
        def transform(c):
            c = c.replace(supervised=_supervised(c, mixing=mixing))
            return _with_stage(c, 'c') if semisup else _without_stage(c, 'c')
        return transform

    rows = ablation(config, 'components', [
        ('baseline', variant('none', False)),
        ('+FaceMix', variant('facemix', False)),
        ('+EMA', variant('none', True)),
        ('+both', variant('facemix', True)),
    ])
    return write_table(output_dir, 'components', rows,
                       plot=_bar_plot('components', 'Component ablation'),
                       emit_plots=emit_plots)


@experiment('mixing')
def mixing(config, output_dir, emit_plots=True):
    config = _without_stage(config, 'c')
    rows = ablation(config, 'mixing', [
        (mode, lambda c, mode=mode: c.replace(
            supervised=_supervised(c, mixing=mode)))
        for mode in ('none', 'mixup', 'facemix')])
    return write_table(output_dir, 'mixing', rows,
                       plot=_bar_plot('mixing', 'Mixing strategies'),
                       emit_plots=emit_plots)


@experiment('kappa')
def kappa(config, output_dir, emit_plots=True):
    config = _without_stage(config, 'c')
    rows = ablation(config, 'kappa', [
        (metric, lambda c, metric=metric: c.replace(supervised=_supervised(
            c, mixing='facemix', facemix=dataclasses.replace(
                c.supervised.facemix, kappa_metric=metric))))
        for metric in ('iou', 'psnr', 'ssim', 'fsim')])
    return write_table(output_dir, 'kappa', rows,
                       plot=_bar_plot('kappa', 'FaceMix similarity metric'),
                       emit_plots=emit_plots)


@experiment('losses')
def losses(config, output_dir, emit_plots=True):
    config = _without_stage(config, 'c')
    rows = ablation(config, 'loss', [
        (tag, lambda c, tag=tag: c.replace(supervised=_supervised(
            c, mixing='facemix', facemix=dataclasses.replace(
                c.supervised.facemix, tag=tag))))
        for tag in ('L1', 'L2', 'L3', 'L4')])
    return write_table(output_dir, 'losses', rows,
                       plot=_bar_plot('loss', 'FaceMix loss variants'),
                       emit_plots=emit_plots)


def run_experiment(name, config, output_dir=None, emit_plots=True):
    """Run a registered experiment

    :param str name: one of available_experiments()
    :param TrainConfig config: base configuration
    :param str output_dir: defaults to <config.output_dir>/<name>
    :rtype: list[str]
    :return: paths of the written report files
    :raises UnknownExperimentError: for unregistered names
    """
    if name not in EXPERIMENTS:
        raise UnknownExperimentError(
            f"Unknown experiment {name}; available: "
            f"{', '.join(available_experiments())}",
            available=available_experiments())
    output_dir = output_dir or os.path.join(config.output_dir, name)
    os.makedirs(output_dir, exist_ok=True)
    logger.info("Running experiment %s into %s", name, output_dir)
    paths = EXPERIMENTS[name](config, output_dir, emit_plots)
    logger.info("Experiment %s wrote %s", name, ', '.join(paths))
    return paths
