#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""ssfer command line"""

import dataclasses
import logging
import os

import click

from . import __version__, constants
from .checkpoint import load_checkpoint, restore_model
from .config import STAGES, TrainConfig, load_config
from .dataset import save_manifest, write_sidecar
from .errors import ConfigError, init_errors_handling
from .evalkit import evaluate
from .experiments import available_experiments, run_experiment
from .logger import init_logging
from .pipeline import load_samples, prepare_data, run_pipeline
from .reports import write_metrics
from .settings import init_config
from .training import set_threads

logger = logging.getLogger(__name__)


def build_config(config_path=None, seed=None, out=None, skip_stages=()):
    """TrainConfig from an optional JSON file plus command line overrides"""
    conf = load_config(config_path) if config_path else TrainConfig()
    overrides = {}
    if seed is not None:
        overrides['seed'] = seed
    if out is not None:
        overrides['output_dir'] = out
    if skip_stages:
        overrides['skip_stages'] = sorted(set(conf.skip_stages) | set(skip_stages))
    return conf.replace(**overrides) if overrides else conf


def config_options(f):
    """--config, --seed and --out shared by every command"""
    f = click.option('--out', type=click.Path(),
                     help='Output directory override')(f)
    f = click.option('--seed', type=int, help='Global seed override')(f)
    return click.option('--config', 'config_path', type=click.Path(exists=True),
                        help='JSON experiment configuration')(f)


def _run(settings, config, overwrite, checkpoint_path=None):
    checkpoint = load_checkpoint(checkpoint_path) if checkpoint_path else None
    manifest = run_pipeline(config, overwrite=overwrite, checkpoint=checkpoint,
                            emit_plots=settings.emit_plots)
    click.echo(f"Run manifest: {os.path.join(config.output_dir, constants.RUN_MANIFEST)}")
    final = manifest.final
    if final:
        click.echo(f"Final accuracy ({final['stage']}): {final['accuracy']:.4f}")


@click.group()
@click.version_option(__version__, prog_name='ssfer')
@click.pass_context
def cli(ctx):
    """Semi-supervised facial expression recognition"""
    settings = init_config()
    init_logging(settings)
    set_threads(settings.threads)
    ctx.obj = settings


@cli.command()
@config_options
@click.option('--skip-stage', 'skip_stages', multiple=True,
              type=click.Choice(STAGES), help='Stage to skip (repeatable)')
@click.option('--checkpoint', 'checkpoint_path', type=click.Path(exists=True),
              help='Starting weights for the first stage that runs')
@click.option('--overwrite', is_flag=True, help='Replace an existing run')
@click.pass_obj
@init_errors_handling
def pipeline(settings, config_path, seed, out, skip_stages, checkpoint_path,
             overwrite):
    """Run pretraining, FaceMix fine-tuning and semi-supervised fine-tuning"""
    config = build_config(config_path, seed, out, skip_stages)
    _run(settings, config, overwrite, checkpoint_path)


@cli.command()
@config_options
@click.option('--overwrite', is_flag=True, help='Replace an existing run')
@click.pass_obj
@init_errors_handling
def pretrain(settings, config_path, seed, out, overwrite):
    """Masked-reconstruction pretraining only"""
    config = build_config(config_path, seed, out, ('b', 'c'))
    _run(settings, config, overwrite)


@cli.command()
@config_options
@click.option('--checkpoint', 'checkpoint_path', type=click.Path(exists=True),
              help='Pretrained checkpoint directory')
@click.option('--overwrite', is_flag=True, help='Replace an existing run')
@click.pass_obj
@init_errors_handling
def finetune(settings, config_path, seed, out, checkpoint_path, overwrite):
    """Supervised FaceMix fine-tuning only"""
    config = build_config(config_path, seed, out, ('a', 'c'))
    _run(settings, config, overwrite, checkpoint_path)


@cli.command()
@config_options
@click.option('--checkpoint', 'checkpoint_path', type=click.Path(exists=True),
              help='Fine-tuned checkpoint directory')
@click.option('--overwrite', is_flag=True, help='Replace an existing run')
@click.pass_obj
@init_errors_handling
def semisup(settings, config_path, seed, out, checkpoint_path, overwrite):
    """Semi-supervised fine-tuning only"""
    config = build_config(config_path, seed, out, ('a', 'b'))
    _run(settings, config, overwrite, checkpoint_path)


@cli.command(name='eval')
@config_options
@click.option('--checkpoint', 'checkpoint_path', required=True,
              type=click.Path(exists=True), help='Checkpoint directory')
@click.pass_obj
@init_errors_handling
def evaluate_checkpoint(settings, config_path, seed, out, checkpoint_path):
    """Evaluate a checkpoint on the configured test split"""
    config = build_config(config_path, seed)
    model = restore_model(load_checkpoint(checkpoint_path), config.model)
    split, _ = prepare_data(config)
    report = evaluate(model, split.test, config.model.class_count)
    paths = write_metrics(out or checkpoint_path, 'eval_metrics', report,
                          settings.emit_plots)
    click.echo(f"Accuracy: {report.accuracy:.4f}")
    for path in paths:
        click.echo(path)


@cli.command()
@click.argument('name')
@config_options
@click.pass_obj
@init_errors_handling
def experiment(settings, name, config_path, seed, out):
    """Run experiment NAME"""
    config = build_config(config_path, seed, out)
    for path in run_experiment(name, config, emit_plots=settings.emit_plots):
        click.echo(path)


experiment.help += f" (one of: {', '.join(available_experiments())})"


@cli.command()
@config_options
@click.option('--budget', type=click.IntRange(min=0),
              help='Fine-tuning epochs per candidate')
@click.pass_obj
@init_errors_handling
def hpo(settings, config_path, seed, out, budget):
    """Search the fine-tuning learning rates with Grey Wolf Optimization"""
    config = build_config(config_path, seed, out)
    if budget is not None:
        config = config.replace(experiments=dataclasses.replace(
            config.experiments, hpo_budget=budget))
    for path in run_experiment('hpo', config, emit_plots=settings.emit_plots):
        click.echo(path)


@cli.command()
@config_options
@click.pass_obj
@init_errors_handling
def synth(settings, config_path, seed, out):
    """Export the configured synthetic dataset as PNG manifests"""
    config = build_config(config_path, seed, out)
    if config.data.source != 'synth':
        raise ConfigError("synth needs data.source set to synth",
                          key='data.source')
    train, test = load_samples(config)
    for part, samples in (('train', train), ('test', test)):
        directory = os.path.join(config.output_dir, part)
        click.echo(save_manifest(samples, directory))
        boxes = {s.id: s.face_box for s in samples if s.face_box is not None}
        write_sidecar(os.path.join(directory, 'boxes.txt'), boxes)
