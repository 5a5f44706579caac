#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Stage (c): EMA-teacher semi-supervised fine-tuning, FixMatch baseline"""

import copy
from dataclasses import dataclass
import logging
import math
import os

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentPolicy, augment_views
from .checkpoint import restore_model, save_checkpoint
from .config import derive_seed
from .errors import DatasetError, ShapeMismatchError
from .evalkit import evaluate
from .model import build_model
from .training import (
    EpochLog,
    StageResult,
    check_finite,
    check_labels,
    cycle_batches,
    labels_tensor,
    make_optimizer,
    model_dtype,
    set_lr,
    warmup_cosine_lr,
)

logger = logging.getLogger(__name__)

STAGE = 'semisup'


@dataclass
class PseudoLabelBatch:
    classes: torch.Tensor
    confidences: torch.Tensor
    accept_mask: torch.Tensor

    @property
    def accept_rate(self):
        if self.accept_mask.numel() == 0:
            return 0.0
        return float(self.accept_mask.float().mean())


def _named_tensors(params):
    if isinstance(params, torch.nn.Module):
        return dict(params.named_parameters())
    return dict(params)


@torch.no_grad()
def ema_update(teacher, student, m):
    """teacher <- m * teacher + (1 - m) * student, elementwise and in place

    :param teacher: nn.Module or mapping name -> tensor
    :param student: same structure as teacher
    :return: teacher
    """
    t_params = _named_tensors(teacher)
    s_params = _named_tensors(student)
    if t_params.keys() != s_params.keys():
        raise ShapeMismatchError("Teacher and student parameter names differ")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ShapeMismatchError(
                f"Parameter {name}: teacher {tuple(t.shape)} vs student "
                f"{tuple(s.shape)}")
        t.mul_(m).add_(s.detach(), alpha=1.0 - m)
    return teacher


def pseudo_label(probs, tau):
    """Hard pseudo-labels from class probabilities

    argmax picks the lowest class index among ties.

    :param probs: B x C tensor, rows summing to 1
    :param float tau: confidence threshold
    :rtype: PseudoLabelBatch
    """
    probs = torch.as_tensor(probs)
    confidences, classes = probs.max(dim=-1)
    return PseudoLabelBatch(classes=classes, confidences=confidences,
                            accept_mask=confidences > tau)


def unlabeled_loss(logits, pl, tau=None):
    """Confidence-gated CE on strong views, divided by the full batch size

    :param logits: student logits on strong views, B x C
    :param PseudoLabelBatch pl: teacher pseudo-labels
    :param float tau: threshold overriding pl.accept_mask
    """
    if logits.shape[0] != pl.classes.shape[0]:
        raise ShapeMismatchError(
            f"{logits.shape[0]} logits rows vs {pl.classes.shape[0]} "
            f"pseudo-labels")
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    accept = pl.accept_mask if tau is None else pl.confidences > tau
    ce = F.cross_entropy(logits, pl.classes, reduction='none')
    return (ce * accept.to(ce.dtype)).sum() / logits.shape[0]


def total_loss(l_l, l_u, mu):
    return l_l + mu * l_u


def steps_per_epoch(config, n_labeled, n_unlabeled):
    if config.steps_per_epoch:
        return config.steps_per_epoch
    if n_unlabeled:
        return math.ceil(n_unlabeled / config.unlabeled_batch_size)
    return math.ceil(n_labeled / config.batch_size)


def run_semisup(config, model_config, labeled, unlabeled, seed,
                checkpoint=None, eval_samples=None, weak=None, strong=None,
                output_dir=None, train_config=None):
    """Semi-supervised fine-tuning of a student with a pseudo-labeling teacher

    Every step: CE on weak labeled views, teacher pseudo-labels on weak
    unlabeled views, gated CE of the student on strong views, one student
    step, then the EMA update. In fixmatch mode the live student labels its
    own weak views.

    :param SemiSupConfig config: stage hyperparameters
    :param ModelConfig model_config: architecture
    :param list labeled: labeled ImageSamples
    :param list unlabeled: ImageSamples without labels
    :param int seed: stage seed
    :param Checkpoint checkpoint: weights to start from (fresh init if None)
    :param list eval_samples: evaluated every epoch (labeled set if None)
    :param AugmentPolicy weak: weak policy
    :param AugmentPolicy strong: strong policy
    :rtype: StageResult
    """
    if not labeled:
        raise DatasetError("Semi-supervised fine-tuning needs labeled samples")
    class_count = model_config.class_count
    check_labels(labeled, class_count)
    weak = weak or AugmentPolicy.weak()
    strong = strong or AugmentPolicy.strong()
    eval_samples = eval_samples or labeled
    if not unlabeled:
        logger.warning("No unlabeled samples, semi-supervised stage trains "
                       "on the labeled set only")

    if checkpoint is not None:
        student = restore_model(checkpoint, model_config)
    else:
        student = build_model(model_config, derive_seed(seed, 'init'))
    ema = config.mode == 'ema_teacher'
    if ema:
        teacher = copy.deepcopy(student)
        teacher.requires_grad_(False)
    else:
        teacher = student
    dtype = model_dtype(student)

    optimizer = make_optimizer(student, config.base_lr, config.weight_decay)
    labeled_batches = cycle_batches(
        len(labeled), config.batch_size,
        np.random.default_rng(derive_seed(seed, 'labeled')))
    labeled_aug = np.random.default_rng(derive_seed(seed, 'labeled_aug'))
    if unlabeled:
        unlabeled_batches = cycle_batches(
            len(unlabeled), config.unlabeled_batch_size,
            np.random.default_rng(derive_seed(seed, 'unlabeled')))
        unlabeled_aug = np.random.default_rng(derive_seed(seed, 'unlabeled_aug'))
    steps = steps_per_epoch(config, len(labeled), len(unlabeled))

    result = StageResult(stage=STAGE, model=teacher)
    best_acc = -1.0
    log_path = os.path.join(output_dir, 'log.csv') if output_dir else None
    fields = ['epoch', 'lr', 'loss', 'labeled_loss', 'unlabeled_loss',
              'accept_rate', 'teacher_acc', 'student_acc']
    with EpochLog(log_path, fields) as log:
        for epoch in range(config.epochs):
            student.train()
            sums = {'loss': 0.0, 'labeled_loss': 0.0, 'unlabeled_loss': 0.0,
                    'accept_rate': 0.0}
            lr = config.base_lr
            for step in range(steps):
                lr = warmup_cosine_lr(epoch + step / steps, config.epochs,
                                      config.warmup_epochs, config.base_lr,
                                      config.min_lr)
                set_lr(optimizer, lr)

                batch = [labeled[i] for i in next(labeled_batches)]
                x_l = augment_views(weak, batch, labeled_aug).to(dtype)
                l_l = F.cross_entropy(student(x_l), labels_tensor(batch))
                accept_rate = 0.0
                if unlabeled:
                    ubatch = [unlabeled[i] for i in next(unlabeled_batches)]
                    x_w = augment_views(weak, ubatch, unlabeled_aug).to(dtype)
                    x_s = augment_views(strong, ubatch, unlabeled_aug).to(dtype)
                    with torch.no_grad():
                        probs = F.softmax(teacher(x_w), dim=-1)
                    pl = pseudo_label(probs, config.tau)
                    l_u = unlabeled_loss(student(x_s), pl)
                    accept_rate = pl.accept_rate
                else:
                    l_u = torch.zeros((), dtype=dtype)
                loss = total_loss(l_l, l_u, config.mu)
                check_finite(loss, STAGE, epoch)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                if ema:
                    ema_update(teacher, student, config.momentum)

                sums['loss'] += loss.item()
                sums['labeled_loss'] += l_l.item()
                sums['unlabeled_loss'] += float(l_u)
                sums['accept_rate'] += accept_rate

            teacher_acc = evaluate(teacher, eval_samples, class_count).accuracy
            student_acc = (evaluate(student, eval_samples, class_count).accuracy
                           if ema else teacher_acc)
            row = {k: v / steps for k, v in sums.items()}
            log.append(epoch=epoch + 1, lr=lr, teacher_acc=teacher_acc,
                       student_acc=student_acc, **row)
            logger.info("semisup epoch %d/%d: loss %.4f accept %.3f "
                        "teacher acc %.4f student acc %.4f", epoch + 1,
                        config.epochs, row['loss'], row['accept_rate'],
                        teacher_acc, student_acc)
            if teacher_acc > best_acc:
                best_acc = teacher_acc
                result.best_state = copy.deepcopy(teacher.state_dict())
        result.history = log.rows

    final_acc = (result.history[-1]['teacher_acc'] if result.history
                 else evaluate(teacher, eval_samples, class_count).accuracy)
    result.metrics = {'eval_acc': final_acc,
                      'best_eval_acc': max(best_acc, final_acc),
                      'mode': config.mode}
    result.student = student
    if output_dir:
        result.checkpoints['final'] = save_checkpoint(
            os.path.join(output_dir, 'final'), teacher, STAGE, config.epochs,
            result.metrics, train_config)
    return result
