#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Accuracy and confusion reports, saliency maps and the FGSM region attack"""

from dataclasses import dataclass, field
import logging
import math

import numpy as np
import torch
import torch.nn.functional as F

from . import constants
from .errors import DatasetError
from .training import images_tensor, labels_tensor

logger = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    accuracy: float
    per_class_accuracy: np.ndarray

    @property
    def count(self):
        return int(self.confusion.sum())

    def to_dict(self):
        return {
            'accuracy': self.accuracy,
            'count': self.count,
            'per_class_accuracy': [
                None if math.isnan(v) else float(v)
                for v in self.per_class_accuracy],
            'confusion': self.confusion.tolist(),
        }


def metrics_from_predictions(labels, predictions, class_count):
    """MetricsReport from true labels and predicted classes"""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.size == 0:
        raise DatasetError("Can't evaluate an empty dataset")
    confusion = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    totals = confusion.sum(axis=1)
    with np.errstate(invalid='ignore', divide='ignore'):
        per_class = np.where(totals > 0, np.diag(confusion) / totals, np.nan)
    accuracy = float(np.trace(confusion) / confusion.sum())
    return MetricsReport(confusion=confusion, accuracy=accuracy,
                         per_class_accuracy=per_class)


@torch.no_grad()
def predict(model, images, batch_size=constants.EVAL_BATCH_SIZE):
    """Logits for a B x C x H x W tensor, computed in fixed-size batches"""
    model.eval()
    outputs = [model(images[start:start + batch_size])
               for start in range(0, images.shape[0], batch_size)]
    return torch.cat(outputs) if outputs else torch.empty(0)


def evaluate(model, samples, class_count, batch_size=constants.EVAL_BATCH_SIZE):
    """Evaluate model on labeled samples

    :rtype: MetricsReport
    :raises DatasetError: for an empty dataset
    """
    if not samples:
        raise DatasetError("Can't evaluate an empty dataset")
    logits = predict(model, images_tensor(samples), batch_size)
    return metrics_from_predictions(
        [s.label for s in samples], logits.argmax(dim=1).numpy(), class_count)


@dataclass
class SaliencyMap:
    values: np.ndarray
    threshold: float = constants.SALIENCY_THRESHOLD
    focused_mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.focused_mask = self.values > self.threshold

    @classmethod
    def from_raw(cls, raw, threshold=constants.SALIENCY_THRESHOLD):
        """Max-normalize a non-negative map; an all-zero map stays zero"""
        raw = np.asarray(raw, dtype=np.float64)
        peak = raw.max()
        values = raw / peak if peak > 0 else np.zeros_like(raw)
        return cls(values=values, threshold=threshold)


class SaliencyProvider:
    """Source of per-pixel importance maps for a model and samples"""

    def saliency_batch(self, model, images, labels, threshold):
        """
        :param images: B x C x H x W tensor
        :param labels: B long tensor
        :rtype: list[SaliencyMap]
        """
        raise NotImplementedError


class GradientSaliency(SaliencyProvider):
    """|dCE/dx| summed over channels"""

    def saliency_batch(self, model, images, labels, threshold):
        model.eval()
        x = images.clone().requires_grad_(True)
        loss = F.cross_entropy(model(x), labels, reduction='sum')
        grad, = torch.autograd.grad(loss, x)
        raw = grad.abs().sum(dim=1).numpy()
        return [SaliencyMap.from_raw(r, threshold) for r in raw]


def saliency(model, sample, threshold=constants.SALIENCY_THRESHOLD,
             provider=None):
    """Saliency map of a labeled sample

    :rtype: SaliencyMap
    """
    provider = provider or GradientSaliency()
    return provider.saliency_batch(model, images_tensor([sample]),
                                   labels_tensor([sample]), threshold)[0]


def saliency_maps(model, samples, threshold=constants.SALIENCY_THRESHOLD,
                  provider=None, batch_size=constants.EVAL_BATCH_SIZE):
    provider = provider or GradientSaliency()
    maps = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        maps.extend(provider.saliency_batch(
            model, images_tensor(chunk), labels_tensor(chunk), threshold))
    return maps


def expression_focus_rate(model, samples, provider=None):
    """Fraction of samples whose mean saliency is higher on eyes and mouth

    Only samples carrying an expression mask count.
    """
    samples = [s for s in samples if s.expression_mask is not None]
    if not samples:
        raise DatasetError("No samples with expression masks")
    hits = 0
    for s, smap in zip(samples, saliency_maps(model, samples, provider=provider)):
        inside = smap.values[s.expression_mask]
        outside = smap.values[~s.expression_mask]
        if inside.size and outside.size and inside.mean() > outside.mean():
            hits += 1
    return hits / len(samples)


def fgsm_batch(model, images, labels, epsilon, region_masks):
    """One signed-gradient step restricted to region_masks

    :param images: B x C x H x W tensor in [0, 1]
    :param region_masks: B x H x W bool tensor
    :return: adversarial images; pixels outside the masks are unchanged
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    model.eval()
    x = images.clone().requires_grad_(True)
    loss = F.cross_entropy(model(x), labels, reduction='sum')
    grad, = torch.autograd.grad(loss, x)
    stepped = (images + epsilon * grad.sign()).clamp(0.0, 1.0)
    mask = region_masks[:, None].expand_as(images)
    return torch.where(mask, stepped, images).detach()


def fgsm_attack(model, sample, epsilon, region_mask):
    """Adversarial H x W x C image for a labeled sample

    Uses the true label for the gradient.
    """
    images = images_tensor([sample])
    masks = torch.as_tensor(np.asarray(region_mask, dtype=bool))[None]
    adversarial = fgsm_batch(model, images, labels_tensor([sample]), epsilon,
                             masks)
    return adversarial[0].permute(1, 2, 0).numpy()


def attack_experiment(model, samples, class_count,
                      epsilons=constants.ATTACK_EPSILONS,
                      threshold=constants.SALIENCY_THRESHOLD, provider=None,
                      batch_size=constants.EVAL_BATCH_SIZE):
    """Accuracy under FGSM on focused and unfocused regions, per epsilon

    Focused pixels come from the saliency map of the clean image; unfocused
    pixels are the complement.

    :rtype: list[dict]
    :return: rows with epsilon, focused, unfocused and clean accuracy
    """
    if not samples:
        raise DatasetError("Can't attack an empty dataset")
    images = images_tensor(samples)
    labels = labels_tensor(samples)
    maps = saliency_maps(model, samples, threshold, provider, batch_size)
    focused = torch.as_tensor(np.stack([m.focused_mask for m in maps]))
    clean = evaluate(model, samples, class_count, batch_size).accuracy

    rows = []
    for epsilon in epsilons:
        row = {'epsilon': float(epsilon), 'clean': clean}
        for region, masks in (('focused', focused), ('unfocused', ~focused)):
            adversarial = torch.cat([
                fgsm_batch(model, images[i:i + batch_size],
                           labels[i:i + batch_size], epsilon,
                           masks[i:i + batch_size])
                for i in range(0, len(samples), batch_size)])
            predictions = predict(model, adversarial, batch_size).argmax(dim=1)
            row[region] = metrics_from_predictions(
                labels.numpy(), predictions.numpy(), class_count).accuracy
        logger.info("FGSM eps=%.3f: focused %.4f, unfocused %.4f",
                    epsilon, row['focused'], row['unfocused'])
        rows.append(row)
    return rows
