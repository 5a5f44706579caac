#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Stage (b): supervised fine-tuning with Mixup/FaceMix"""

import copy
import logging
import math
import os

import numpy as np
import torch
import torch.nn.functional as F

from .augment import augment_views, kappa, make_mix_pair, sample_lambda
from .checkpoint import restore_model, save_checkpoint
from .config import FACEMIX_TAGS, derive_seed
from .dataset import StoredBoxProvider
from .errors import ConfigError, DatasetError
from .evalkit import evaluate
from .model import build_model
from .training import (
    EpochLog,
    StageResult,
    check_finite,
    check_labels,
    images_tensor,
    iterate_batches,
    labels_tensor,
    make_optimizer,
    model_dtype,
    set_lr,
    warmup_cosine_lr,
)

logger = logging.getLogger(__name__)

STAGE = 'supervised'


def soft_ce(logits, soft_labels):
    """Cross-entropy against soft targets, averaged over the batch"""
    log_probs = F.log_softmax(logits, dim=-1)
    return -(soft_labels * log_probs).sum(dim=-1).mean()


def facemix_loss(variant, l_v, l_i, l_j, kappa_value):
    """Combine virtual and real-image losses by a loss variant

    L1 = (1-k)Lv + Li + Lj, L2 = Lv + (1-k)(Li + Lj),
    L3 = k Lv + Li + Lj, L4 = Lv + k(Li + Lj).
    Works elementwise on tensors.

    :param variant: FaceMixVariant or its tag
    """
    tag = getattr(variant, 'tag', variant)
    if tag == 'L1':
        return (1 - kappa_value) * l_v + l_i + l_j
    if tag == 'L2':
        return l_v + (1 - kappa_value) * (l_i + l_j)
    if tag == 'L3':
        return kappa_value * l_v + l_i + l_j
    if tag == 'L4':
        return l_v + kappa_value * (l_i + l_j)
    raise ConfigError(f"Unknown FaceMix loss variant {tag}; expected one of "
                      f"{', '.join(FACEMIX_TAGS)}", key='supervised.facemix.tag')


def derangement(n, rng):
    """Permutation without fixed points: one random cycle through all items"""
    order = rng.permutation(n)
    perm = np.empty(n, dtype=np.int64)
    perm[order] = np.roll(order, -1)
    return perm


def facemix_batch_loss(model, samples, variant, alpha, box_provider, seed,
                       class_count, mixing='facemix', policy=None, lam=None,
                       kappa_value=None):
    """FaceMix (or Mixup) loss of one labeled batch

    Every sample k is mixed with partner perm[k] of a random derangement.
    Each pair gets its own lambda ~ Beta(alpha, alpha) and kappa. Real-image
    terms are plain CE on the (augmented, un-mixed) views.

    :param model: MaskedViT
    :param list samples: labeled ImageSamples
    :param FaceMixVariant variant: loss variant and kappa metric
    :param float alpha: Beta parameter
    :param BoxProvider box_provider: face boxes for the iou metric
    :param seed: int or numpy Generator
    :param str mixing: facemix, mixup or none
    :param AugmentPolicy policy: view augmentation, none when omitted
    :param float lam: fixed lambda for every pair
    :param float kappa_value: fixed kappa for every pair
    :rtype: torch.Tensor
    """
    rng = np.random.default_rng(seed)
    labels = labels_tensor(samples)
    if policy is not None:
        views = augment_views(policy, samples, rng)
    else:
        views = images_tensor(samples)
    views = views.to(model_dtype(model))
    if mixing == 'none':
        return F.cross_entropy(model(views), labels)
    if len(samples) < 2:
        logger.warning("Batch of %d sample can't be mixed, using plain CE",
                       len(samples))
        return F.cross_entropy(model(views), labels)

    n = len(samples)
    perm = derangement(n, rng)
    if lam is None:
        lams = sample_lambda(alpha, rng, size=n)
    else:
        lams = np.full(n, float(lam))
    if mixing == 'mixup':
        kappas = np.zeros(n)
    elif kappa_value is not None:
        kappas = np.full(n, float(kappa_value))
    else:
        kappas = np.array([
            kappa(samples[k], samples[perm[k]], variant.kappa_metric,
                  box_provider)
            for k in range(n)])

    dtype = views.dtype
    pairs = [make_mix_pair(samples[k], samples[perm[k]], class_count,
                           float(lams[k]), float(kappas[k]),
                           views=(views[k], views[perm[k]]))
             for k in range(n)]
    x_mixed = torch.stack([p.x_mixed for p in pairs])
    y_mixed = torch.stack([p.y_mixed for p in pairs])
    l_v = -(y_mixed * F.log_softmax(model(x_mixed), dim=-1)).sum(dim=-1)
    if mixing == 'mixup':
        return l_v.mean()

    ce = F.cross_entropy(model(views), labels, reduction='none')
    per_pair = facemix_loss(variant, l_v, ce, ce[perm],
                            torch.as_tensor(kappas, dtype=dtype))
    return per_pair.mean()


def effective_epochs(config, n_labeled):
    """Epochs after the small-label extension"""
    if n_labeled < config.small_label_threshold:
        return config.epochs * config.small_label_epoch_factor
    return config.epochs


def run_supervised(config, model_config, labeled, seed, checkpoint=None,
                   eval_samples=None, box_provider=None, policy=None,
                   output_dir=None, train_config=None):
    """Fine-tune on labeled samples with the configured mixing strategy

    :param SupervisedConfig config: stage hyperparameters
    :param ModelConfig model_config: architecture
    :param list labeled: labeled ImageSamples
    :param int seed: stage seed
    :param Checkpoint checkpoint: weights to start from (fresh init if None)
    :param list eval_samples: evaluated every epoch (labeled set if None)
    :param BoxProvider box_provider: face boxes, stored boxes by default
    :param AugmentPolicy policy: weak view augmentation
    :param str output_dir: where checkpoints and the epoch CSV go
    :param dict train_config: configuration snapshot for the checkpoints
    :rtype: StageResult
    """
    if not labeled:
        raise DatasetError("Supervised fine-tuning needs labeled samples")
    class_count = model_config.class_count
    check_labels(labeled, class_count)
    if checkpoint is not None:
        model = restore_model(checkpoint, model_config)
    else:
        model = build_model(model_config, derive_seed(seed, 'init'))
    box_provider = box_provider or StoredBoxProvider()
    eval_samples = eval_samples or labeled

    epochs = effective_epochs(config, len(labeled))
    if epochs != config.epochs:
        logger.info("%d labeled samples: extending fine-tuning to %d epochs",
                    len(labeled), epochs)
    optimizer = make_optimizer(model, config.base_lr, config.weight_decay)
    rng = np.random.default_rng(derive_seed(seed, 'batches'))
    steps = math.ceil(len(labeled) / config.batch_size)

    result = StageResult(stage=STAGE, model=model)
    best_acc = -1.0
    log_path = os.path.join(output_dir, 'log.csv') if output_dir else None
    with EpochLog(log_path, ['epoch', 'lr', 'loss', 'eval_acc']) as log:
        for epoch in range(epochs):
            model.train()
            losses = []
            lr = config.base_lr
            for step, index in enumerate(
                    iterate_batches(len(labeled), config.batch_size, rng)):
                lr = warmup_cosine_lr(epoch + step / steps, epochs,
                                      config.warmup_epochs, config.base_lr,
                                      config.min_lr, config.warmup_init_lr)
                set_lr(optimizer, lr)
                loss = facemix_batch_loss(
                    model, [labeled[i] for i in index], config.facemix,
                    config.alpha, box_provider, rng, class_count,
                    mixing=config.mixing, policy=policy)
                check_finite(loss, STAGE, epoch)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
            acc = evaluate(model, eval_samples, class_count).accuracy
            log.append(epoch=epoch + 1, lr=lr, loss=float(np.mean(losses)),
                       eval_acc=acc)
            logger.info("supervised epoch %d/%d: loss %.4f eval acc %.4f",
                        epoch + 1, epochs, np.mean(losses), acc)
            if acc > best_acc:
                best_acc = acc
                result.best_state = copy.deepcopy(model.state_dict())
        result.history = log.rows

    final_acc = (result.history[-1]['eval_acc'] if result.history
                 else evaluate(model, eval_samples, class_count).accuracy)
    result.metrics = {'eval_acc': final_acc,
                      'best_eval_acc': max(best_acc, final_acc),
                      'epochs': epochs}
    if output_dir:
        result.checkpoints['final'] = save_checkpoint(
            os.path.join(output_dir, 'final'), model, STAGE, epochs,
            result.metrics, train_config)
        best_model = copy.deepcopy(model)
        if result.best_state is not None:
            best_model.load_state_dict(result.best_state)
        result.checkpoints['best'] = save_checkpoint(
            os.path.join(output_dir, 'best'), best_model, STAGE, epochs,
            {'eval_acc': result.metrics['best_eval_acc']}, train_config)
    return result
