#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Three-stage driver: pretrain -> supervised FaceMix -> semi-supervised"""

from dataclasses import asdict, dataclass, field
import logging
import os
import shutil
import time
from typing import Any, Dict, List

from . import __version__, constants
from .checkpoint import checkpoint_from_model, load_checkpoint
from .config import derive_seed, save_config
from .dataset import (
    LabelBudget,
    SynthSpec,
    inject_label_noise,
    kfold_split,
    load_manifest,
    make_box_provider,
    subsample_labels,
    synth_generate,
)
from .errors import OutputDirExistsError
from .evalkit import evaluate
from .pretrain import run_pretrain
from .reports import write_json, write_metrics
from .semisup import run_semisup
from .supervised import run_supervised

logger = logging.getLogger(__name__)


@dataclass
class StageOutcome:
    stage: str
    checkpoints: Dict[str, str] = field(default_factory=dict)
    metrics: Dict[str, Any] = field(default_factory=dict)
    artifacts: List[str] = field(default_factory=list)


@dataclass
class RunManifest:
    config: Dict[str, Any]
    seed: int
    stages: List[StageOutcome] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    code_version: str = __version__

    @property
    def final(self):
        """Test metrics of the last stage that ran"""
        for outcome in reversed(self.stages):
            if 'test_accuracy' in outcome.metrics:
                return {'stage': outcome.stage,
                        'accuracy': outcome.metrics['test_accuracy']}
        return None

    @property
    def artifacts(self):
        paths = []
        for outcome in self.stages:
            paths.extend(outcome.checkpoints.values())
            paths.extend(outcome.artifacts)
        return paths

    def missing_artifacts(self):
        return [p for p in self.artifacts if not os.path.exists(p)]

    def to_dict(self):
        data = asdict(self)
        data['final'] = self.final
        return data


def _synth_samples(data, seed, patch_size):
    train = synth_generate(SynthSpec(
        n_samples=data.n_train, class_count=data.class_count,
        image_size=data.image_size, jitter=data.jitter,
        seed=derive_seed(seed, 'synth_train'), patch_size=patch_size))
    test = synth_generate(SynthSpec(
        n_samples=data.n_test, class_count=data.class_count,
        image_size=data.image_size, jitter=data.jitter,
        seed=derive_seed(seed, 'synth_test'), patch_size=patch_size,
        id_prefix='test'))
    return train, test


def load_samples(config):
    """(training samples, test samples) for the configured data source"""
    data = config.data
    if data.source == 'synth':
        return _synth_samples(data, config.seed, config.model.patch_size)
    train = load_manifest(data.manifest_path)
    if data.test_manifest_path:
        return train, load_manifest(data.test_manifest_path)
    train, test = kfold_split(train, constants.DEFAULT_KFOLD,
                              derive_seed(config.seed, 'holdout'))[0]
    return train, test


def label_budget(data):
    if data.budget_per_class is not None:
        return LabelBudget(per_class=data.budget_per_class)
    return LabelBudget(fraction=data.budget_fraction)


def build_split(config, train, test):
    """Budgeted labeled/unlabeled split with the configured label noise"""
    split = subsample_labels(train, label_budget(config.data),
                             derive_seed(config.seed, 'budget'),
                             class_count=config.model.class_count, test=test)
    if config.data.noise_ratio:
        split = inject_label_noise(split, config.data.noise_ratio,
                                   derive_seed(config.seed, 'noise'))
    return split


def prepare_data(config):
    """(DatasetSplit, BoxProvider) for a run"""
    train, test = load_samples(config)
    split = build_split(config, train, test)
    provider = make_box_provider(config.data.box_provider,
                                 config.data.sidecar_path)
    return split, provider


def run_stages(config, split, box_provider, output_dir=None, checkpoint=None,
               emit_plots=True):
    """Run the stages not listed in config.skip_stages, chaining checkpoints

    Without an output directory nothing is written and stages chain in
    memory.

    :param Checkpoint checkpoint: starting weights for the first stage run
    :return: (list of StageOutcome, model of the last stage or None)
    """
    outcomes = []
    model = None
    snapshot = config.to_dict()

    def stage_dir(name):
        return os.path.join(output_dir, name) if output_dir else None

    def chain(result):
        if 'final' in result.checkpoints:
            return load_checkpoint(result.checkpoints['final'])
        return None

    def test_metrics(outcome, model, name):
        report = evaluate(model, split.test, config.model.class_count)
        outcome.metrics['test_accuracy'] = report.accuracy
        if output_dir:
            outcome.artifacts.extend(write_metrics(
                stage_dir(name), 'test_metrics', report, emit_plots))

    if 'a' not in config.skip_stages:
        images = [s.with_label(None) for s in split.labeled] + list(split.unlabeled)
        result = run_pretrain(config.pretrain, config.model, images,
                              derive_seed(config.seed, 'pretrain'),
                              output_dir=stage_dir('pretrain'),
                              policy=config.augment.weak)
        outcome = StageOutcome('pretrain', result.checkpoints, result.metrics)
        if output_dir:
            outcome.artifacts.append(os.path.join(stage_dir('pretrain'), 'log.csv'))
        outcomes.append(outcome)
        checkpoint = chain(result) or checkpoint_from_model(result.model, 'pretrain')
        model = result.model

    if 'b' not in config.skip_stages:
        result = run_supervised(config.supervised, config.model, split.labeled,
                                derive_seed(config.seed, 'supervised'),
                                checkpoint=checkpoint, eval_samples=split.test,
                                box_provider=box_provider,
                                policy=config.augment.weak,
                                output_dir=stage_dir('supervised'),
                                train_config=snapshot)
        outcome = StageOutcome('supervised', result.checkpoints, result.metrics)
        if output_dir:
            outcome.artifacts.append(
                os.path.join(stage_dir('supervised'), 'log.csv'))
        test_metrics(outcome, result.model, 'supervised')
        outcomes.append(outcome)
        checkpoint = chain(result) or checkpoint_from_model(result.model, 'supervised')
        model = result.model

    if 'c' not in config.skip_stages:
        result = run_semisup(config.semisup, config.model, split.labeled,
                             split.unlabeled, derive_seed(config.seed, 'semisup'),
                             checkpoint=checkpoint, eval_samples=split.test,
                             weak=config.augment.weak,
                             strong=config.augment.strong,
                             output_dir=stage_dir('semisup'),
                             train_config=snapshot)
        outcome = StageOutcome('semisup', result.checkpoints, result.metrics)
        if output_dir:
            outcome.artifacts.append(os.path.join(stage_dir('semisup'), 'log.csv'))
        test_metrics(outcome, result.model, 'semisup')
        outcomes.append(outcome)
        model = result.model

    return outcomes, model


def prepare_output_dir(output_dir, overwrite):
    """Create output_dir, refusing to reuse one holding a finished run"""
    manifest = os.path.join(output_dir, constants.RUN_MANIFEST)
    if os.path.exists(manifest):
        if not overwrite:
            raise OutputDirExistsError(
                f"{output_dir} already holds a run; pass --overwrite to "
                f"replace it")
        logger.warning("Overwriting the run in %s", output_dir)
        shutil.rmtree(output_dir)
    os.makedirs(output_dir, exist_ok=True)


def run_pipeline(config, overwrite=False, checkpoint=None, emit_plots=True):
    """Execute the configured stages and write the run manifest

    :param TrainConfig config: run configuration
    :param bool overwrite: replace an existing run in config.output_dir
    :param Checkpoint checkpoint: starting weights when stage (a) is skipped
    :rtype: RunManifest
    """
    started = time.monotonic()
    prepare_output_dir(config.output_dir, overwrite)
    save_config(config, os.path.join(config.output_dir, 'config.json'))
    split, provider = prepare_data(config)
    logger.info("Data: %d labeled, %d unlabeled, %d test samples",
                len(split.labeled), len(split.unlabeled), len(split.test))

    outcomes, _ = run_stages(config, split, provider, config.output_dir,
                             checkpoint, emit_plots)
    manifest = RunManifest(config=config.to_dict(), seed=config.seed,
                           stages=outcomes,
                           wall_clock_seconds=time.monotonic() - started)
    missing = manifest.missing_artifacts()
    if missing:
        logger.error("Artifacts listed but not written: %s", missing)
    write_json(os.path.join(config.output_dir, constants.RUN_MANIFEST),
               manifest.to_dict())
    logger.info("Run finished in %.1fs, final: %s",
                manifest.wall_clock_seconds, manifest.final)
    return manifest
