#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Stage (a): masked-reconstruction pretraining and the mask-ratio study"""

import dataclasses
import logging
import math
import os

import numpy as np
import torch

from . import constants
from .augment import augment_views
from .checkpoint import save_checkpoint
from .config import derive_seed
from .errors import ConfigError, DatasetError
from .model import build_model, patchify, sample_masks, unpatchify
from .reports import plot_image_grid, plot_lines, write_table
from .training import (
    EpochLog,
    StageResult,
    check_finite,
    images_tensor,
    iterate_batches,
    make_optimizer,
    set_lr,
    warmup_cosine_lr,
)

logger = logging.getLogger(__name__)

STAGE = 'pretrain'


def _patch_stats(patches):
    mean = patches.mean(dim=-1, keepdim=True)
    std = patches.var(dim=-1, unbiased=False, keepdim=True).sqrt()
    return mean, std.clamp_min(constants.TARGET_STD_FLOOR)


def recon_targets(patches, mask=None, normalize=True):
    """Reconstruction targets; with normalize each masked patch is standardized

    :param mask: bool tensor over patches (N or B x N); visible rows keep
        their raw values. Without a mask every row is standardized.
    """
    if not normalize:
        return patches
    mean, std = _patch_stats(patches)
    targets = (patches - mean) / std
    if mask is None:
        return targets
    mask = torch.as_tensor(mask, dtype=torch.bool)
    return torch.where(mask[..., None], targets, patches)


def recon_loss(predicted, targets, mask):
    """Mean squared error over the entries of masked patches only

    :param mask: bool tensor over patches (N or B x N)
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not mask.any():
        raise ConfigError("Reconstruction loss needs at least one masked patch",
                          key='pretrain.mask_ratio')
    return ((predicted - targets) ** 2)[mask].mean()


def mae_loss(model, images, mask_ratio, normalize, rng):
    predicted, patches, masked = model.forward_mae(images, mask_ratio, rng)
    return recon_loss(predicted, recon_targets(patches, masked, normalize), masked)


def run_pretrain(config, model_config, samples, seed, output_dir=None,
                 policy=None):
    """Pretrain encoder and decoder by masked reconstruction

    :param PretrainConfig config: stage hyperparameters
    :param ModelConfig model_config: architecture
    :param list samples: unlabeled ImageSamples
    :param int seed: stage seed
    :param str output_dir: where the checkpoint and loss CSV go (optional)
    :param AugmentPolicy policy: view augmentation (none by default)
    :rtype: StageResult
    """
    if not samples:
        raise DatasetError("Pretraining needs at least one image")
    model = build_model(model_config, derive_seed(seed, 'init'))
    optimizer = make_optimizer(model, config.base_lr, config.weight_decay,
                               betas=constants.PRETRAIN_BETAS)
    rng = np.random.default_rng(derive_seed(seed, 'batches'))
    images = images_tensor(samples)
    steps = math.ceil(len(samples) / config.batch_size)

    log_path = os.path.join(output_dir, 'log.csv') if output_dir else None
    result = StageResult(stage=STAGE, model=model)
    with EpochLog(log_path, ['epoch', 'lr', 'loss']) as log:
        for epoch in range(config.epochs):
            model.train()
            losses = []
            lr = config.base_lr
            for step, index in enumerate(
                    iterate_batches(len(samples), config.batch_size, rng)):
                lr = warmup_cosine_lr(epoch + step / steps, config.epochs,
                                      config.warmup_epochs, config.base_lr)
                set_lr(optimizer, lr)
                if policy is not None:
                    batch = augment_views(policy, [samples[i] for i in index], rng)
                else:
                    batch = images[torch.as_tensor(index)]
                loss = mae_loss(model, batch, config.mask_ratio,
                                config.normalize_targets, rng)
                check_finite(loss, STAGE, epoch)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
            mean_loss = float(np.mean(losses))
            log.append(epoch=epoch + 1, lr=lr, loss=mean_loss)
            logger.info("pretrain epoch %d/%d: loss %.5f lr %.3g",
                        epoch + 1, config.epochs, mean_loss, lr)
        result.history = log.rows

    result.metrics = {'final_loss': result.history[-1]['loss']
                      if result.history else None}
    if output_dir:
        path = save_checkpoint(os.path.join(output_dir, 'final'), model, STAGE,
                               config.epochs, result.metrics)
        result.checkpoints['final'] = path
    return result


@torch.no_grad()
def reconstruct(model, samples, mask_ratio, normalize, seed):
    """Reconstructed images with visible patches pasted from the input

    :return: (reconstructions, masked-input images, per-sample masked-patch
        MSE in pixel space), images as B x H x W x C arrays
    """
    model.eval()
    cfg = model.config
    images = images_tensor(samples)
    rng = np.random.default_rng(seed)
    patches = patchify(images, cfg.patch_size)
    visible, masked = sample_masks(len(samples), cfg.n_patches, mask_ratio, rng)
    visible_patches = torch.gather(
        patches, 1, visible[..., None].expand(-1, -1, patches.shape[-1]))
    predicted = model.decode(model.encode(visible_patches, visible), visible)
    if normalize:
        mean, std = _patch_stats(patches)
        predicted = predicted * std + mean
    composite = torch.where(masked[..., None], predicted, patches)
    errors = ((predicted - patches) ** 2).mean(dim=-1)
    masked_mse = (errors * masked).sum(dim=1) / masked.sum(dim=1)
    hidden = torch.where(masked[..., None], torch.full_like(patches, 0.5), patches)

    def to_images(p):
        out = unpatchify(p, cfg.patch_size, cfg.in_chans)
        return out.clamp(0.0, 1.0).permute(0, 2, 3, 1).numpy()
    return to_images(composite), to_images(hidden), masked_mse.numpy()


def mask_ratio_study(ratios, config, samples, seed, eval_samples=None,
                     output_dir=None, emit_plots=True, grid_size=4):
    """Pretrain once per mask ratio and compare reconstructions

    Reports masked-patch MSE and the MSE restricted to expression pixels
    (eyes and mouth, known for synthetic faces) of the reconstructed image.

    :param list ratios: mask ratios in (0, 1)
    :param TrainConfig config: base configuration
    :param list samples: pretraining images
    :param list eval_samples: images to reconstruct (defaults to samples)
    :rtype: list[dict]
    """
    for rho in ratios:
        if not 0 < rho < 1:
            raise ConfigError(f"Mask ratio must lie in (0, 1), got {rho}",
                              key='experiments.mask_ratios')
    eval_samples = eval_samples or samples
    eval_seed = derive_seed(seed, 'mask_eval')
    rows = []
    grid_columns = {}
    for rho in ratios:
        stage_config = dataclasses.replace(config.pretrain, mask_ratio=rho)
        model_config = dataclasses.replace(config.model, mask_ratio=rho)
        result = run_pretrain(stage_config, model_config, samples, seed)
        recon, hidden, masked_mse = reconstruct(
            result.model, eval_samples, rho, stage_config.normalize_targets,
            eval_seed)
        expression_errors = []
        for s, image in zip(eval_samples, recon):
            if s.expression_mask is not None and s.expression_mask.any():
                diff = (image - s.pixels)[s.expression_mask]
                expression_errors.append(float(np.mean(diff ** 2)))
        rows.append({
            'mask_ratio': rho,
            'masked_mse': float(np.mean(masked_mse)),
            'expression_mse': (float(np.mean(expression_errors))
                               if expression_errors else float('nan')),
            'final_loss': result.metrics['final_loss'],
        })
        grid_columns[rho] = (hidden[:grid_size], recon[:grid_size])
        logger.info("mask ratio %.2f: masked MSE %.5f, expression MSE %.5f",
                    rho, rows[-1]['masked_mse'], rows[-1]['expression_mse'])

    if output_dir:
        def plot(path, table):
            return plot_lines(path, [r['mask_ratio'] for r in table], {
                'masked patches': [r['masked_mse'] for r in table],
                'expression region': [r['expression_mse'] for r in table],
            }, 'mask ratio', 'MSE', 'Reconstruction error by mask ratio')
        write_table(output_dir, 'maskratio', rows, plot=plot,
                    emit_plots=emit_plots)
        if emit_plots:
            titles = ['input']
            grid = [[s.pixels] for s in eval_samples[:grid_size]]
            for rho, (hidden, recon) in grid_columns.items():
                titles += [f'masked {rho:.2f}', f'recon {rho:.2f}']
                for row, h, r in zip(grid, hidden, recon):
                    row += [h, r]
            plot_image_grid(os.path.join(output_dir, 'maskratio_grid.png'),
                            grid, titles)
    return rows
