#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Grey Wolf Optimization and the fine-tuning learning-rate search"""

import dataclasses
from dataclasses import dataclass, field
import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import constants
from .config import derive_seed
from .dataset import kfold_split
from .errors import ConfigError
from .reports import plot_lines, write_table
from .supervised import run_supervised

logger = logging.getLogger(__name__)


@dataclass
class GwoConfig:
    wolves: int = constants.DEFAULT_WOLVES
    iterations: int = constants.DEFAULT_GWO_ITERATIONS
    bounds: Sequence[Tuple[float, float]] = ((-1.0, 1.0),)
    seed: int = 0

    def __post_init__(self):
        if self.wolves < 4:
            raise ConfigError("GWO needs at least 4 wolves", key='hpo_wolves')
        if self.iterations < 1:
            raise ConfigError("GWO needs at least 1 iteration",
                              key='hpo_iterations')
        for lo, hi in self.bounds:
            if not lo < hi:
                raise ConfigError(f"Invalid search bounds ({lo}, {hi})")


@dataclass
class SearchResult:
    best_position: np.ndarray
    best_fitness: float
    history: List[float] = field(default_factory=list)
    best_positions: List[np.ndarray] = field(default_factory=list, repr=False)


def control_parameter(t, iterations):
    """a(t), falling linearly from 2 at the first to 0 at the last iteration"""
    if iterations <= 1:
        return 2.0
    return 2.0 - 2.0 * t / (iterations - 1)


def _evaluate(objective, positions):
    fitness = np.empty(len(positions))
    for i, position in enumerate(positions):
        value = float(objective(position.copy()))
        if math.isnan(value):
            logger.warning("Objective returned NaN at %s, treated as +inf",
                           position.tolist())
            value = math.inf
        fitness[i] = value
    return fitness


def _leaders(candidates):
    """Three best (fitness, position) pairs, stable among equal fitness"""
    ranked = sorted(candidates, key=lambda c: c[0])
    while len(ranked) < 3:
        ranked.append(ranked[-1])
    return ranked[:3]


def gwo_optimize(objective, config, initial_positions=None):
    """Minimize objective over a box with the canonical grey wolf update

    Iteration 0 evaluates the initial pack; each later iteration moves every
    wolf towards alpha, beta and delta. The leaders are the best positions
    seen so far, so the history never increases.

    :param objective: callable mapping a position vector to a float
    :param GwoConfig config: pack size, iterations, bounds, seed
    :param initial_positions: optional rows replacing the first random wolves
    :rtype: SearchResult
    """
    rng = np.random.default_rng(config.seed)
    lo = np.array([b[0] for b in config.bounds], dtype=np.float64)
    hi = np.array([b[1] for b in config.bounds], dtype=np.float64)
    dim = len(lo)

    positions = lo + rng.random((config.wolves, dim)) * (hi - lo)
    if initial_positions is not None:
        seeded = np.clip(np.atleast_2d(np.asarray(initial_positions,
                                                  dtype=np.float64)), lo, hi)
        positions[:len(seeded)] = seeded[:config.wolves]
    fitness = _evaluate(objective, positions)
    leaders = _leaders([(f, p.copy()) for f, p in zip(fitness, positions)])
    history = [leaders[0][0]]
    best_positions = [leaders[0][1].copy()]
    logger.debug("GWO iteration 0: best %.6g", history[-1])

    for t in range(1, config.iterations):
        a = control_parameter(t, config.iterations)
        for i in range(config.wolves):
            candidate = np.zeros(dim)
            for _, leader in leaders:
                r1 = rng.random(dim)
                r2 = rng.random(dim)
                big_a = 2.0 * a * r1 - a
                big_c = 2.0 * r2
                distance = np.abs(big_c * leader - positions[i])
                candidate += leader - big_a * distance
            positions[i] = np.clip(candidate / 3.0, lo, hi)
        fitness = _evaluate(objective, positions)
        leaders = _leaders(leaders + [(f, p.copy())
                                      for f, p in zip(fitness, positions)])
        history.append(leaders[0][0])
        best_positions.append(leaders[0][1].copy())
        logger.debug("GWO iteration %d: a=%.3f best %.6g", t, a, history[-1])

    return SearchResult(best_position=leaders[0][1], best_fitness=leaders[0][0],
                        history=history, best_positions=best_positions)


def decode_learning_rates(position):
    """log10 position -> (min_lr, warmup_init_lr, base_lr), ascending"""
    low, mid, high = sorted(10.0 ** np.asarray(position, dtype=np.float64))
    return float(low), float(mid), float(high)


def encode_learning_rates(supervised_config):
    return np.log10([supervised_config.base_lr, supervised_config.min_lr,
                     supervised_config.warmup_init_lr])


def with_learning_rates(config, position):
    min_lr, warmup_init_lr, base_lr = decode_learning_rates(position)
    supervised = dataclasses.replace(config.supervised, base_lr=base_lr,
                                     min_lr=min_lr,
                                     warmup_init_lr=warmup_init_lr)
    return config.replace(supervised=supervised)


def proxy_accuracy(config, train, validation, budget, seed, checkpoint=None,
                   box_provider=None):
    """Validation accuracy of a truncated fine-tuning run"""
    stage = dataclasses.replace(
        config.supervised, epochs=budget,
        warmup_epochs=min(config.supervised.warmup_epochs, budget),
        small_label_threshold=0)
    result = run_supervised(stage, config.model, train, seed,
                            checkpoint=checkpoint, eval_samples=validation,
                            box_provider=box_provider,
                            policy=config.augment.weak)
    return result.metrics['eval_acc']


def search_learning_rates(base_config, split, budget, checkpoint=None,
                          box_provider=None, gwo_config=None):
    """GWO over the (max, min, warmup-init) learning rates in log10 space

    :return: (tuned TrainConfig, SearchResult or None for a zero budget)
    """
    if budget == 0:
        return base_config, None
    seed = derive_seed(base_config.seed, 'hpo')
    folds = 5 if len(split.labeled) >= 5 else 2
    train, validation = kfold_split(split.labeled, folds, seed)[0]
    low, high = (math.log10(b) for b in constants.LR_SEARCH_BOUNDS)
    gwo_config = gwo_config or GwoConfig(
        wolves=base_config.experiments.hpo_wolves,
        iterations=base_config.experiments.hpo_iterations,
        bounds=[(low, high)] * 3,
        seed=seed)
    proxy_seed = derive_seed(seed, 'proxy')
    base_position = np.clip(encode_learning_rates(base_config.supervised),
                            low, high)

    def candidate_config(position):
        # the seeded base point maps back to the exact base values
        if np.array_equal(position, base_position):
            return base_config
        return with_learning_rates(base_config, position)

    def objective(position):
        candidate = candidate_config(position)
        acc = proxy_accuracy(candidate, train, validation, budget, proxy_seed,
                             checkpoint, box_provider)
        logger.info("lr triple %s: proxy accuracy %.4f",
                    decode_learning_rates(position), acc)
        return -acc

    result = gwo_optimize(objective, gwo_config,
                          initial_positions=[base_position])
    tuned = candidate_config(result.best_position)
    logger.info("Tuned learning rates: max %.3g, min %.3g, warmup init %.3g",
                tuned.supervised.base_lr, tuned.supervised.min_lr,
                tuned.supervised.warmup_init_lr)
    return tuned, result


def search_log_rows(result):
    rows = []
    for t, (fitness, position) in enumerate(zip(result.history,
                                                result.best_positions)):
        min_lr, warmup_init_lr, base_lr = decode_learning_rates(position)
        rows.append({'iteration': t, 'best_fitness': fitness,
                     'best_position': ' '.join(f'{v:.6f}' for v in position),
                     'base_lr': base_lr, 'min_lr': min_lr,
                     'warmup_init_lr': warmup_init_lr})
    return rows


def lr_search(base_config, split, budget, checkpoint=None, box_provider=None,
              output_dir: Optional[str] = None, emit_plots=True):
    """Tune the fine-tuning learning-rate triple

    :param TrainConfig base_config: configuration to start from
    :param DatasetSplit split: its labeled part provides train/validation
    :param int budget: fine-tuning epochs per proxy evaluation
    :rtype: TrainConfig
    """
    tuned, result = search_learning_rates(base_config, split, budget,
                                          checkpoint, box_provider)
    if result is not None and output_dir:
        def plot(path, rows):
            return plot_lines(path, [r['iteration'] for r in rows],
                              {'best fitness': [r['best_fitness'] for r in rows]},
                              'iteration', '-accuracy', 'GWO search')
        write_table(output_dir, 'hpo', search_log_rows(result),
                    summary={'base_lr': tuned.supervised.base_lr,
                             'min_lr': tuned.supervised.min_lr,
                             'warmup_init_lr': tuned.supervised.warmup_init_lr,
                             'best_fitness': result.best_fitness},
                    plot=plot, emit_plots=emit_plots)
    return tuned
