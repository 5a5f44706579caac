#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Samples, face boxes, label budgets, splits and the synthetic face generator"""

from dataclasses import dataclass, field, replace
import json
import logging
import math
import os
from typing import Dict, List, Optional, Sequence, Tuple

from jsonschema import validate
from jsonschema.exceptions import ValidationError
import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetError, InsufficientSamplesError

logger = logging.getLogger(__name__)


def round_half_up(x):
    """Round to the nearest integer, halves away from zero for x >= 0"""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class FaceBox:
    """Face bounding box in pixel coordinates, x1/y1 exclusive"""
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if self.x0 < 0 or self.y0 < 0:
            raise DatasetError(f"Face box has negative coordinates: {self}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise DatasetError(f"Face box has no area: {self}")

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def within(self, height, width):
        return self.x1 <= width and self.y1 <= height

    def as_tuple(self):
        return self.x0, self.y0, self.x1, self.y1


@dataclass(frozen=True)
class ImageSample:
    """A single image; the unit of all three training stages

    ``pixels`` is a float32 H x W x C array in [0, 1]. ``expression_mask``
    marks eye and mouth pixels when they are known (synthetic data only).
    """
    id: str
    pixels: np.ndarray = field(repr=False)
    label: Optional[int] = None
    face_box: Optional[FaceBox] = None
    expression_mask: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise DatasetError(
                f"Sample {self.id}: expected H x W x C pixels, "
                f"got shape {self.pixels.shape}")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise DatasetError(f"Sample {self.id}: pixels outside [0, 1]")
        if self.label is not None and self.label < 0:
            raise DatasetError(f"Sample {self.id}: negative label")
        if self.face_box is not None:
            h, w = self.pixels.shape[:2]
            if not self.face_box.within(h, w):
                raise DatasetError(
                    f"Sample {self.id}: face box {self.face_box} outside "
                    f"{w}x{h} image")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def with_label(self, label):
        return replace(self, label=label)


@dataclass(frozen=True)
class DatasetSplit:
    labeled: List[ImageSample]
    unlabeled: List[ImageSample]
    test: List[ImageSample]
    class_count: int

    def __post_init__(self):
        seen = set()
        for part in (self.labeled, self.unlabeled, self.test):
            ids = {s.id for s in part}
            if len(ids) != len(part):
                raise DatasetError("Duplicate sample ids inside a split part")
            if seen & ids:
                raise DatasetError(
                    f"Split parts overlap on ids: {sorted(seen & ids)[:5]}")
            seen |= ids
        for s in self.labeled + self.test:
            if s.label is None:
                raise DatasetError(f"Sample {s.id} is expected to be labeled")
            if not 0 <= s.label < self.class_count:
                raise DatasetError(
                    f"Sample {s.id}: label {s.label} outside "
                    f"[0, {self.class_count})")
        for s in self.unlabeled:
            if s.label is not None:
                raise DatasetError(f"Sample {s.id} is expected to be unlabeled")


@dataclass(frozen=True)
class SynthSpec:
    n_samples: int
    class_count: int = 3
    image_size: int = 32
    jitter: float = 0.0
    seed: int = 0
    patch_size: Optional[int] = None
    id_prefix: str = 'synth'

    def __post_init__(self):
        if self.n_samples < 0:
            raise ConfigError("n_samples must be non-negative",
                              key='n_samples')
        if self.class_count < 2:
            raise ConfigError("class_count must be at least 2",
                              key='class_count')
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8 pixels",
                              key='image_size')
        if not 0 <= self.jitter <= 1:
            raise ConfigError("jitter must lie in [0, 1]", key='jitter')
        if self.patch_size and self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch "
                f"size {self.patch_size}", key='image_size')


@dataclass(frozen=True)
class LabelBudget:
    """Either k labeled samples per class or a global labeled fraction"""
    per_class: Optional[int] = None
    fraction: Optional[float] = None

    def __post_init__(self):
        if (self.per_class is None) == (self.fraction is None):
            raise ConfigError(
                "Label budget needs exactly one of per_class and fraction")
        if self.per_class is not None and self.per_class < 0:
            raise ConfigError("per_class budget must be non-negative")
        if self.fraction is not None and not 0 <= self.fraction <= 1:
            raise ConfigError("fraction budget must lie in [0, 1]")


#
# synthetic faces
#

def mouth_curvature(label, class_count):
    """Signed mouth curvature: -1 downturned (class 0) ... +1 upturned"""
    return float(np.linspace(-1.0, 1.0, class_count)[label])


def _render_face(rng, size, label, class_count, jitter):
    """Draw one face; returns pixels, face mask and expression mask"""
    # draw every random quantity regardless of jitter so the stream
    # stays aligned between jittered and plain datasets
    background = rng.uniform(0.05, 0.25)
    skin = rng.uniform(0.55, 0.85)
    tint = rng.uniform(0.9, 1.1, size=3)
    scale = 1.0 + jitter * rng.uniform(-0.25, 0.25)
    shift = jitter * rng.uniform(-0.2, 0.2, size=2) * size
    texture = rng.normal(0.0, 0.02, size=(size, size, 3))

    rx = 0.26 * size * scale
    ry = 0.34 * size * scale
    cx = float(np.clip(size / 2 + shift[0], rx + 0.5, size - rx - 0.5))
    cy = float(np.clip(size / 2 + shift[1], ry + 0.5, size - ry - 0.5))

    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    face = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0

    eye_r = max(0.13 * rx, 0.75)
    eyes = np.zeros_like(face)
    for side in (-1, 1):
        ex, ey = cx + side * 0.38 * rx, cy - 0.25 * ry
        eyes |= (xx - ex) ** 2 + (yy - ey) ** 2 <= eye_r ** 2

    half_width = 0.45 * rx
    amplitude = 0.18 * ry
    bend = mouth_curvature(label, class_count)
    u = (xx - cx) / half_width
    arc_y = cy + 0.45 * ry - bend * amplitude * (u ** 2 - 0.5)
    thickness = max(0.09 * ry, 0.6)
    mouth = (np.abs(u) <= 1.0) & (np.abs(yy - arc_y) <= thickness)

    eyes &= face
    mouth &= face
    expression = eyes | mouth

    pixels = np.full((size, size, 3), background)
    skin_rgb = np.clip(skin * tint, 0.0, 1.0)
    pixels[face] = np.clip(skin_rgb + texture[face], 0.35, 1.0)
    pixels[expression] = np.clip(0.08 + texture[expression], 0.0, 0.2)
    return pixels.astype(np.float32), face, expression


def _tight_box(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return FaceBox(int(cols[0]), int(rows[0]),
                   int(cols[-1]) + 1, int(rows[-1]) + 1)


def synth_generate(spec):
    """Render a labeled synthetic face dataset

    Each image is an ellipse face with two eyes and a mouth arc whose
    curvature encodes the class. ``face_box`` is the tight bounding box of the
    rendered ellipse; pose jitter shifts and scales the face.

    :param SynthSpec spec: what to generate
    :rtype: list[ImageSample]
    """
    rng = np.random.default_rng(spec.seed)
    labels = rng.permutation(np.arange(spec.n_samples) % spec.class_count)
    samples = []
    for i, label in enumerate(labels):
        pixels, face, expression = _render_face(
            rng, spec.image_size, int(label), spec.class_count, spec.jitter)
        samples.append(ImageSample(
            id=f'{spec.id_prefix}_{i:05d}',
            pixels=pixels,
            label=int(label),
            face_box=_tight_box(face),
            expression_mask=expression,
        ))
    logger.debug("Generated %d synthetic faces (seed=%d, jitter=%.2f)",
                 len(samples), spec.seed, spec.jitter)
    return samples


#
# splits
#

def _class_count(samples, class_count):
    if class_count is not None:
        return class_count
    labels = [s.label for s in samples if s.label is not None]
    if not labels:
        raise DatasetError("No labeled samples to infer the class count from")
    return max(labels) + 1


def _by_class(samples, class_count):
    groups = {c: [] for c in range(class_count)}
    for i, s in enumerate(samples):
        if s.label is None:
            raise DatasetError(f"Sample {s.id} has no label to budget by")
        if not 0 <= s.label < class_count:
            raise DatasetError(
                f"Sample {s.id}: label {s.label} outside [0, {class_count})")
        groups[s.label].append(i)
    return groups


def largest_remainder_quotas(counts, total):
    """Split total over classes proportionally to counts

    Every class gets the floor of its proportional share; the leftover units
    go to the largest fractional parts, ties to the lower class index.
    """
    n = sum(counts)
    if n == 0:
        return [0] * len(counts)
    shares = [total * c / n for c in counts]
    quotas = [int(math.floor(s)) for s in shares]
    leftover = total - sum(quotas)
    order = sorted(range(len(counts)), key=lambda c: (-(shares[c] - quotas[c]), c))
    for c in order[:leftover]:
        quotas[c] += 1
    return quotas


def subsample_labels(samples, budget, seed, class_count=None, test=()):
    """Keep labels for a budgeted, class-stratified subset of samples

    :param list[ImageSample] samples: labeled training samples
    :param LabelBudget budget: per-class count or global fraction
    :param int seed: selection seed
    :param int class_count: number of classes (inferred when None)
    :param test: held-out labeled samples carried into the split untouched
    :rtype: DatasetSplit
    :raises InsufficientSamplesError: when a class can't fill its quota
    """
    class_count = _class_count(samples, class_count)
    groups = _by_class(samples, class_count)
    if budget.per_class is not None:
        quotas = [budget.per_class] * class_count
    else:
        total = round_half_up(budget.fraction * len(samples))
        quotas = largest_remainder_quotas(
            [len(groups[c]) for c in range(class_count)], total)

    rng = np.random.default_rng(seed)
    chosen = set()
    for c in range(class_count):
        members = groups[c]
        if len(members) < quotas[c]:
            raise InsufficientSamplesError(
                f"Class {c} has {len(members)} samples, budget needs "
                f"{quotas[c]}", class_index=c)
        picked = rng.permutation(len(members))[:quotas[c]]
        chosen.update(members[i] for i in picked)

    labeled = [s for i, s in enumerate(samples) if i in chosen]
    unlabeled = [s.with_label(None) for i, s in enumerate(samples)
                 if i not in chosen]
    logger.info("Label budget %s: %d labeled, %d unlabeled",
                budget, len(labeled), len(unlabeled))
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled,
                        test=list(test), class_count=class_count)


def inject_label_noise(split, ratio, seed):
    """Replace labels of exactly round(ratio * |labeled|) samples

    Every corrupted label moves to a uniformly drawn *different* class.
    Unlabeled and test samples are untouched.

    :rtype: DatasetSplit
    """
    if not 0 <= ratio <= 1:
        raise ConfigError(f"Noise ratio must lie in [0, 1], got {ratio}")
    n_noisy = round_half_up(ratio * len(split.labeled))
    if n_noisy == 0:
        return split
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(split.labeled), size=n_noisy, replace=False)
    offsets = rng.integers(1, split.class_count, size=n_noisy)
    labeled = list(split.labeled)
    for i, offset in zip(picked, offsets):
        old = labeled[i].label
        labeled[i] = labeled[i].with_label(int((old + offset) % split.class_count))
    logger.info("Injected label noise into %d of %d labeled samples",
                n_noisy, len(labeled))
    return replace(split, labeled=labeled)


def kfold_split(samples, k, seed) -> List[Tuple[List[ImageSample], List[ImageSample]]]:
    """Partition samples into K folds; pair i validates on fold i

    Fold sizes differ by at most one.
    """
    if k < 2:
        raise ConfigError(f"K-fold needs K >= 2, got {k}")
    if k > len(samples):
        raise DatasetError(f"K={k} exceeds the {len(samples)} samples")
    rng = np.random.default_rng(seed)
    folds = [np.sort(f) for f in np.array_split(rng.permutation(len(samples)), k)]
    pairs = []
    for i, fold in enumerate(folds):
        in_fold = set(fold.tolist())
        validation = [samples[j] for j in fold]
        train = [s for j, s in enumerate(samples) if j not in in_fold]
        pairs.append((train, validation))
    return pairs


#
# face boxes
#

class BoxProvider:
    """Source of face boxes for the FaceMix overlap weight"""

    name = None

    def box(self, sample):
        raise NotImplementedError


class StoredBoxProvider(BoxProvider):
    """Boxes stored on the samples (e.g. from the synthetic generator)"""

    name = 'stored'

    def box(self, sample):
        if sample.face_box is None:
            raise DatasetError(f"Sample {sample.id} has no stored face box")
        return sample.face_box


class FullImageBoxProvider(BoxProvider):
    """The whole frame, used when no detection is available"""

    name = 'full_image'

    def box(self, sample):
        return FaceBox(0, 0, sample.width, sample.height)


class SidecarBoxProvider(BoxProvider):
    """Boxes read from a sidecar file, one ``id x0 y0 x1 y1`` per line"""

    name = 'sidecar'

    def __init__(self, path):
        self.path = path
        self._boxes = read_sidecar(path)
        self._fallback = FullImageBoxProvider()

    def box(self, sample):
        try:
            return self._boxes[sample.id]
        except KeyError:
            logger.warning("No box for %s in %s, using the full image",
                           sample.id, self.path)
            return self._fallback.box(sample)


def make_box_provider(name, sidecar_path=None):
    if name == StoredBoxProvider.name:
        return StoredBoxProvider()
    if name == FullImageBoxProvider.name:
        return FullImageBoxProvider()
    if name == SidecarBoxProvider.name:
        return SidecarBoxProvider(sidecar_path)
    raise ConfigError(f"Unknown box provider: {name}", key='data.box_provider')


def face_boxes(provider, sample):
    """Face box of sample according to provider"""
    return provider.box(sample)


def read_sidecar(path) -> Dict[str, FaceBox]:
    boxes = {}
    with open(path, encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise DatasetError(
                    f"{path}:{lineno}: expected 'id x0 y0 x1 y1', got {line!r}")
            try:
                coords = [int(p) for p in parts[1:]]
            except ValueError:
                raise DatasetError(
                    f"{path}:{lineno}: box coordinates must be integers")
            boxes[parts[0]] = FaceBox(*coords)
    logger.debug("Read %d boxes from %s", len(boxes), path)
    return boxes


def write_sidecar(path, boxes):
    """Write id -> FaceBox mapping in the sidecar format"""
    with open(path, 'w', encoding='utf-8') as f:
        for sample_id, b in boxes.items():
            f.write(f'{sample_id} {int(b.x0)} {int(b.y0)} {int(b.x1)} {int(b.y1)}\n')


#
# dataset manifests
#

SCHEMA_MANIFEST = {
    "$schema": "http://json-schema.org/draft-04/schema#",
    "title": "Dataset manifest",
    "type": "array",
    "items": {
        "type": "object",
        "properties": {
            "id": {"type": "string"},
            "path": {
                "description": "8-bit PNG, relative to the manifest",
                "type": "string",
            },
            "pixels": {
                "description": "inline H x W x C values in [0, 1]",
                "type": "array",
            },
            "label": {"type": ["integer", "null"], "minimum": 0},
            "box": {
                "type": ["array", "null"],
                "items": {"type": "number"},
                "minItems": 4,
                "maxItems": 4,
            },
        },
        "required": ["id"],
        "additionalProperties": False,
    },
}


def _read_png(path):
    with Image.open(path) as img:
        arr = np.asarray(img.convert('RGB'), dtype=np.float32)
    return arr / 255.0


def _write_png(path, pixels):
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def load_manifest(path):
    """Load samples listed in a JSON manifest

    :param str path: manifest file
    :rtype: list[ImageSample]
    """
    with open(path, encoding='utf-8') as f:
        try:
            entries = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f'{path}:{e.lineno}:{e.colno}: {e.msg}')
    try:
        validate(entries, SCHEMA_MANIFEST)
    except ValidationError as e:
        raise DatasetError(f"Manifest {path}: {e.message}")

    base = os.path.dirname(os.path.abspath(path))
    samples = []
    for entry in entries:
        if 'pixels' in entry:
            pixels = np.asarray(entry['pixels'], dtype=np.float32)
        elif 'path' in entry:
            pixels = _read_png(os.path.join(base, entry['path']))
        else:
            raise DatasetError(
                f"Manifest entry {entry['id']} has neither path nor pixels")
        box = entry.get('box')
        samples.append(ImageSample(
            id=entry['id'],
            pixels=pixels,
            label=entry.get('label'),
            face_box=FaceBox(*box) if box else None,
        ))
    logger.info("Loaded %d samples from %s", len(samples), path)
    return samples


def save_manifest(samples: Sequence[ImageSample], directory,
                  name='manifest.json'):
    """Write samples as PNG files plus a JSON manifest into directory

    :rtype: str
    :return: path of the written manifest
    """
    image_dir = os.path.join(directory, 'images')
    os.makedirs(image_dir, exist_ok=True)
    entries = []
    for s in samples:
        rel_path = os.path.join('images', f'{s.id}.png')
        _write_png(os.path.join(directory, rel_path), s.pixels)
        entries.append({
            'id': s.id,
            'path': rel_path,
            'label': s.label,
            'box': list(s.face_box.as_tuple()) if s.face_box else None,
        })
    manifest_path = os.path.join(directory, name)
    with open(manifest_path, 'w', encoding='utf-8') as f:
        json.dump(entries, f, indent=2)
    logger.info("Wrote %d samples to %s", len(entries), manifest_path)
    return manifest_path
