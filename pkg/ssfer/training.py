#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Pieces shared by the three training stages"""

import csv
from dataclasses import dataclass, field
import logging
import math
import os
from typing import Any, Dict, List, Optional

import numpy as np
import torch

from .errors import DatasetError, TrainingDivergedError

logger = logging.getLogger(__name__)


@dataclass
class StageResult:
    """Outcome of one training stage"""
    stage: str
    model: Any
    history: List[Dict[str, Any]] = field(default_factory=list)
    metrics: Dict[str, Any] = field(default_factory=dict)
    checkpoints: Dict[str, str] = field(default_factory=dict)
    best_state: Optional[Dict[str, torch.Tensor]] = field(default=None,
                                                           repr=False)
    student: Any = field(default=None, repr=False)


def warmup_cosine_lr(progress, epochs, warmup_epochs, base_lr, min_lr=0.0,
                     warmup_init_lr=0.0):
    """Learning rate at a fractional epoch

    Linear from warmup_init_lr to base_lr over the warmup epochs, then half
    a cosine from base_lr down to min_lr.
    """
    if warmup_epochs > 0 and progress < warmup_epochs:
        return warmup_init_lr + (base_lr - warmup_init_lr) * progress / warmup_epochs
    span = epochs - warmup_epochs
    if span <= 0:
        return base_lr
    t = min(1.0, (progress - warmup_epochs) / span)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * t))


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group['lr'] = lr


def make_optimizer(model, lr, weight_decay, betas=(0.9, 0.999)):
    """AdamW without weight decay on biases, norms, tokens and embeddings"""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim <= 1 or name.endswith(('_token', 'pos_embed')):
            no_decay.append(p)
        else:
            decay.append(p)
    return torch.optim.AdamW(
        [{'params': no_decay, 'weight_decay': 0.0},
         {'params': decay, 'weight_decay': weight_decay}],
        lr=lr, betas=betas)


def iterate_batches(n, batch_size, rng):
    """Index batches of one shuffled pass over n items"""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def cycle_batches(n, batch_size, rng):
    """Endless index batches, reshuffled after every pass"""
    if n == 0:
        raise DatasetError("Can't draw batches from an empty set")
    while True:
        yield from iterate_batches(n, batch_size, rng)


def images_tensor(samples):
    """B x C x H x W float32 tensor of the sample pixels"""
    array = np.stack([s.pixels for s in samples]).astype(np.float32)
    return torch.from_numpy(array).permute(0, 3, 1, 2).contiguous()


def labels_tensor(samples):
    return torch.tensor([s.label for s in samples], dtype=torch.long)


def check_labels(samples, class_count):
    for s in samples:
        if s.label is None or not 0 <= s.label < class_count:
            raise DatasetError(
                f"Sample {s.id}: label {s.label} outside [0, {class_count})")


def check_finite(loss, stage, epoch):
    """Abort the stage when the loss stops being a number"""
    if not torch.isfinite(loss).all():
        raise TrainingDivergedError(
            f"Loss of stage {stage} diverged in epoch {epoch}: {loss.item()}",
            stage=stage, epoch=epoch)


def set_threads(threads):
    if threads:
        torch.set_num_threads(threads)
        logger.debug("torch intra-op threads set to %d", threads)


class EpochLog:
    """Append-only CSV of per-epoch values"""

    def __init__(self, path, fieldnames):
        self.path = path
        self.fieldnames = list(fieldnames)
        self.rows = []
        self._file = None
        self._writer = None
        if path:
            os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
            self._file = open(path, 'w', newline='', encoding='utf-8')
            self._writer = csv.DictWriter(self._file, fieldnames=self.fieldnames)
            self._writer.writeheader()

    def append(self, **row):
        self.rows.append(row)
        if self._writer:
            self._writer.writerow(row)
            self._file.flush()

    def close(self):
        if self._file:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def model_dtype(model):
    return next(model.parameters()).dtype
