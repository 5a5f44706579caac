#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Experiment configuration: stage hyperparameters, JSON schema, seeds"""

import dataclasses
from dataclasses import dataclass, field
import hashlib
import json
import logging
from typing import List, Optional
import zlib

from jsonschema import Draft4Validator

from . import constants
from .augment import AugmentPolicy
from .errors import ConfigError

logger = logging.getLogger(__name__)

STAGES = ('a', 'b', 'c')
KAPPA_METRICS = ('iou', 'psnr', 'ssim', 'fsim')
FACEMIX_TAGS = ('L1', 'L2', 'L3', 'L4')
MIXING_MODES = ('none', 'mixup', 'facemix')
SEMISUP_MODES = ('ema_teacher', 'fixmatch')
BOX_PROVIDERS = ('stored', 'full_image', 'sidecar')


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    in_chans: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    decoder_embed_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 4
    class_count: int = 3
    mask_ratio: float = constants.DEFAULT_MASK_RATIO

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by "
                f"patch_size {self.patch_size}", key='model.image_size')
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by "
                f"heads {self.heads}", key='model.embed_dim')
        if self.decoder_embed_dim % self.decoder_heads:
            raise ConfigError(
                f"decoder_embed_dim {self.decoder_embed_dim} is not divisible "
                f"by decoder_heads {self.decoder_heads}",
                key='model.decoder_embed_dim')
        if not 0 < self.mask_ratio < 1:
            raise ConfigError(
                f"mask_ratio must lie in (0, 1), got {self.mask_ratio}",
                key='model.mask_ratio')
        if self.class_count < 2:
            raise ConfigError("class_count must be at least 2",
                              key='model.class_count')

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_len(self):
        return self.patch_size ** 2 * self.in_chans

    @classmethod
    def vit_base(cls, class_count=7):
        """ViT-Base/16 at 224x224 with the usual MAE decoder"""
        return cls(image_size=224, patch_size=16, embed_dim=768, depth=12,
                   heads=12, decoder_embed_dim=512, decoder_depth=8,
                   decoder_heads=16, class_count=class_count)


@dataclass
class PretrainConfig:
    epochs: int = constants.DEFAULT_PRETRAIN_EPOCHS
    warmup_epochs: int = constants.DEFAULT_PRETRAIN_WARMUP_EPOCHS
    base_lr: float = constants.DEFAULT_PRETRAIN_LR
    batch_size: int = constants.DEFAULT_PRETRAIN_BATCH_SIZE
    mask_ratio: float = constants.DEFAULT_MASK_RATIO
    normalize_targets: bool = True
    weight_decay: float = constants.DEFAULT_WEIGHT_DECAY

    def __post_init__(self):
        if not 0 < self.mask_ratio < 1:
            raise ConfigError(
                f"mask_ratio must lie in (0, 1), got {self.mask_ratio}",
                key='pretrain.mask_ratio')
        if self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs must not exceed epochs",
                              key='pretrain.warmup_epochs')


@dataclass
class FaceMixVariant:
    tag: str = 'L4'
    kappa_metric: str = 'iou'

    def __post_init__(self):
        if self.tag not in FACEMIX_TAGS:
            raise ConfigError(f"Unknown FaceMix loss variant: {self.tag}",
                              key='supervised.facemix.tag')
        if self.kappa_metric not in KAPPA_METRICS:
            raise ConfigError(f"Unknown kappa metric: {self.kappa_metric}",
                              key='supervised.facemix.kappa_metric')


@dataclass
class SupervisedConfig:
    epochs: int = constants.DEFAULT_SUPERVISED_EPOCHS
    warmup_epochs: int = constants.DEFAULT_SUPERVISED_WARMUP_EPOCHS
    base_lr: float = constants.DEFAULT_SUPERVISED_LR
    min_lr: float = constants.DEFAULT_SUPERVISED_MIN_LR
    warmup_init_lr: float = constants.DEFAULT_SUPERVISED_WARMUP_INIT_LR
    batch_size: int = constants.DEFAULT_SUPERVISED_BATCH_SIZE
    mixing: str = 'facemix'
    facemix: FaceMixVariant = field(default_factory=FaceMixVariant)
    alpha: float = constants.DEFAULT_MIX_ALPHA
    weight_decay: float = constants.DEFAULT_WEIGHT_DECAY
    small_label_threshold: int = constants.SMALL_LABEL_THRESHOLD
    small_label_epoch_factor: int = constants.SMALL_LABEL_EPOCH_FACTOR

    def __post_init__(self):
        if isinstance(self.facemix, dict):
            self.facemix = FaceMixVariant(**self.facemix)
        if self.min_lr > self.base_lr:
            raise ConfigError("min_lr must not exceed base_lr",
                              key='supervised.min_lr')
        if self.mixing not in MIXING_MODES:
            raise ConfigError(f"Unknown mixing mode: {self.mixing}",
                              key='supervised.mixing')
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive", key='supervised.alpha')


@dataclass
class SemiSupConfig:
    epochs: int = constants.DEFAULT_SEMISUP_EPOCHS
    warmup_epochs: int = 0
    base_lr: float = constants.DEFAULT_SEMISUP_LR
    min_lr: float = 0.0
    batch_size: int = constants.DEFAULT_SEMISUP_BATCH_SIZE
    unlabeled_batch_size: int = constants.DEFAULT_SEMISUP_BATCH_SIZE
    tau: float = constants.DEFAULT_TAU
    mu: float = constants.DEFAULT_MU
    momentum: float = constants.DEFAULT_EMA_MOMENTUM
    mode: str = 'ema_teacher'
    steps_per_epoch: Optional[int] = None
    weight_decay: float = constants.DEFAULT_WEIGHT_DECAY

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)", key='semisup.tau')
        if self.mu < 0:
            raise ConfigError("mu must be non-negative", key='semisup.mu')
        if not 0 <= self.momentum <= 1:
            raise ConfigError("momentum must lie in [0, 1]",
                              key='semisup.momentum')
        if self.mode not in SEMISUP_MODES:
            raise ConfigError(f"Unknown semi-supervised mode: {self.mode}",
                              key='semisup.mode')


@dataclass
class AugmentConfig:
    weak: AugmentPolicy = field(default_factory=AugmentPolicy.weak)
    strong: AugmentPolicy = field(default_factory=AugmentPolicy.strong)

    def __post_init__(self):
        if isinstance(self.weak, dict):
            self.weak = AugmentPolicy(**_tuples(self.weak))
        if isinstance(self.strong, dict):
            self.strong = AugmentPolicy(**_tuples(self.strong))


@dataclass
class DataConfig:
    source: str = 'synth'
    manifest_path: Optional[str] = None
    test_manifest_path: Optional[str] = None
    n_train: int = 2000
    n_test: int = 500
    class_count: int = 3
    image_size: int = 32
    jitter: float = 0.3
    budget_per_class: Optional[int] = None
    budget_fraction: Optional[float] = 0.1
    noise_ratio: float = 0.0
    box_provider: str = 'stored'
    sidecar_path: Optional[str] = None

    def __post_init__(self):
        if (self.budget_per_class is None) == (self.budget_fraction is None):
            raise ConfigError(
                "exactly one of budget_per_class and budget_fraction "
                "must be set", key='data.budget_fraction')
        if self.box_provider == 'sidecar' and not self.sidecar_path:
            raise ConfigError("sidecar box provider needs sidecar_path",
                              key='data.sidecar_path')
        if self.source == 'manifest' and not self.manifest_path:
            raise ConfigError("manifest source needs manifest_path",
                              key='data.manifest_path')


@dataclass
class ExperimentsConfig:
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    kfold: int = constants.DEFAULT_KFOLD
    noise_ratios: List[float] = field(
        default_factory=lambda: list(constants.NOISE_RATIOS))
    noise_budgets: List[float] = field(default_factory=lambda: [0.1])
    epsilons: List[float] = field(
        default_factory=lambda: list(constants.ATTACK_EPSILONS))
    saliency_threshold: float = constants.SALIENCY_THRESHOLD
    mask_ratios: List[float] = field(default_factory=lambda: [0.5, 0.75, 0.9])
    hpo_wolves: int = constants.DEFAULT_WOLVES
    hpo_iterations: int = constants.DEFAULT_GWO_ITERATIONS
    hpo_budget: int = 5


@dataclass
class TrainConfig:
    seed: int = 0
    output_dir: str = 'runs/default'
    skip_stages: List[str] = field(default_factory=list)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    supervised: SupervisedConfig = field(default_factory=SupervisedConfig)
    semisup: SemiSupConfig = field(default_factory=SemiSupConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    experiments: ExperimentsConfig = field(default_factory=ExperimentsConfig)

    def __post_init__(self):
        unknown = set(self.skip_stages) - set(STAGES)
        if unknown:
            raise ConfigError(f"Unknown stages to skip: {sorted(unknown)}",
                              key='skip_stages')
        if self.data.image_size != self.model.image_size:
            raise ConfigError(
                "data.image_size must match model.image_size",
                key='data.image_size')
        if self.data.class_count != self.model.class_count:
            raise ConfigError(
                "data.class_count must match model.class_count",
                key='data.class_count')
        if self.model.mask_ratio != self.pretrain.mask_ratio:
            raise ConfigError(
                f"model.mask_ratio {self.model.mask_ratio} differs from "
                f"pretrain.mask_ratio {self.pretrain.mask_ratio}",
                key='model.mask_ratio')

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **sections):
        """Copy of the config with whole sections or top-level keys replaced"""
        return dataclasses.replace(self, **sections)


def _tuples(data):
    """JSON has no tuples, range pairs come back as lists"""
    return {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}


def _number(minimum=None, maximum=None, exclusive=False, nullable=False):
    schema = {"type": ["number", "null"] if nullable else "number"}
    if minimum is not None:
        schema["minimum"] = minimum
        schema["exclusiveMinimum"] = exclusive
    if maximum is not None:
        schema["maximum"] = maximum
        schema["exclusiveMaximum"] = exclusive
    return schema


def _integer(minimum=0, nullable=False):
    return {"type": ["integer", "null"] if nullable else "integer",
            "minimum": minimum}


def _section(properties, required=()):
    schema = {
        "type": "object",
        "properties": properties,
        "additionalProperties": False,
    }
    if required:
        schema["required"] = list(required)
    return schema


_POLICY_SCHEMA = _section({
    "kind": {"enum": ["weak", "strong"]},
    "crop_scale_range": {
        "type": "array", "items": _number(0, 1), "minItems": 2, "maxItems": 2,
    },
    "flip_prob": _number(0, 1),
    "randaugment_ops": _integer(0),
    "randaugment_magnitude": {"type": "integer", "minimum": 0, "maximum": 10},
})

SCHEMA_CONFIG = {
    "$schema": "http://json-schema.org/draft-04/schema#",
    "title": "Configuration of a three-stage training run",
    "type": "object",
    "properties": {
        "seed": _integer(0),
        "output_dir": {"type": "string"},
        "skip_stages": {"type": "array", "items": {"enum": list(STAGES)}},
        "model": _section({
            "image_size": _integer(1),
            "patch_size": _integer(1),
            "in_chans": _integer(1),
            "embed_dim": _integer(1),
            "depth": _integer(1),
            "heads": _integer(1),
            "mlp_ratio": _number(0, exclusive=True),
            "decoder_embed_dim": _integer(1),
            "decoder_depth": _integer(1),
            "decoder_heads": _integer(1),
            "class_count": _integer(2),
            "mask_ratio": _number(0, 1, exclusive=True),
        }),
        "pretrain": _section({
            "epochs": _integer(0),
            "warmup_epochs": _integer(0),
            "base_lr": _number(0),
            "batch_size": _integer(1),
            "mask_ratio": _number(0, 1, exclusive=True),
            "normalize_targets": {"type": "boolean"},
            "weight_decay": _number(0),
        }),
        "supervised": _section({
            "epochs": _integer(0),
            "warmup_epochs": _integer(0),
            "base_lr": _number(0),
            "min_lr": _number(0),
            "warmup_init_lr": _number(0),
            "batch_size": _integer(1),
            "mixing": {"enum": list(MIXING_MODES)},
            "facemix": _section({
                "tag": {"enum": list(FACEMIX_TAGS)},
                "kappa_metric": {"enum": list(KAPPA_METRICS)},
            }),
            "alpha": _number(0, exclusive=True),
            "weight_decay": _number(0),
            "small_label_threshold": _integer(0),
            "small_label_epoch_factor": _integer(1),
        }),
        "semisup": _section({
            "epochs": _integer(0),
            "warmup_epochs": _integer(0),
            "base_lr": _number(0),
            "min_lr": _number(0),
            "batch_size": _integer(1),
            "unlabeled_batch_size": _integer(1),
            "tau": _number(0, 1, exclusive=True),
            "mu": _number(0),
            "momentum": _number(0, 1),
            "mode": {"enum": list(SEMISUP_MODES)},
            "steps_per_epoch": _integer(1, nullable=True),
            "weight_decay": _number(0),
        }),
        "augment": _section({
            "weak": _POLICY_SCHEMA,
            "strong": _POLICY_SCHEMA,
        }),
        "data": _section({
            "source": {"enum": ["synth", "manifest"]},
            "manifest_path": {"type": ["string", "null"]},
            "test_manifest_path": {"type": ["string", "null"]},
            "n_train": _integer(1),
            "n_test": _integer(0),
            "class_count": _integer(2),
            "image_size": _integer(1),
            "jitter": _number(0, 1),
            "budget_per_class": _integer(1, nullable=True),
            "budget_fraction": _number(0, 1, nullable=True),
            "noise_ratio": _number(0, 1),
            "box_provider": {"enum": list(BOX_PROVIDERS)},
            "sidecar_path": {"type": ["string", "null"]},
        }),
        "experiments": _section({
            "seeds": {"type": "array", "items": _integer(0), "minItems": 1},
            "kfold": _integer(2),
            "noise_ratios": {"type": "array", "items": _number(0, 1)},
            "noise_budgets": {"type": "array", "items": _number(0, 1)},
            "epsilons": {"type": "array", "items": _number(0)},
            "saliency_threshold": _number(0, 1),
            "mask_ratios": {
                "type": "array", "items": _number(0, 1, exclusive=True)},
            "hpo_wolves": _integer(4),
            "hpo_iterations": _integer(1),
            "hpo_budget": _integer(0),
        }),
    },
    "required": ["seed", "output_dir"],
    "additionalProperties": False,
}


def validate_conf(data):
    """Validate if a config document meets the schema expectations

    :param dict data: parsed JSON config
    :raises ConfigError: naming the first offending key
    """
    validator = Draft4Validator(SCHEMA_CONFIG)
    errors = sorted(validator.iter_errors(data),
                    key=lambda e: [str(p) for p in e.absolute_path])
    if not errors:
        return
    error = errors[0]
    key = '.'.join(str(p) for p in error.absolute_path)
    if error.validator == 'required':
        missing = error.message.split("'")[1]
        key = f'{key}.{missing}' if key else missing
    raise ConfigError(f"{key or '<root>'}: {error.message}", key=key or None)


def from_dict(data):
    """Build TrainConfig from a (validated) config document"""
    validate_conf(data)
    data = dict(data)
    sections = {
        'model': ModelConfig,
        'pretrain': PretrainConfig,
        'supervised': SupervisedConfig,
        'semisup': SemiSupConfig,
        'augment': AugmentConfig,
        'data': DataConfig,
        'experiments': ExperimentsConfig,
    }
    if 'data' in data:
        data['data'] = dict(data['data'])
        # a per-class budget replaces the default fraction
        if ('budget_per_class' in data['data']
                and 'budget_fraction' not in data['data']):
            data['data']['budget_fraction'] = None
    kwargs = {}
    for name, cls in sections.items():
        if name in data:
            kwargs[name] = cls(**data.pop(name))
    return TrainConfig(**data, **kwargs)


def load_config(path):
    """Read the JSON config document from path

    :param str path: path to the config file
    :rtype: TrainConfig
    :raises ConfigError: on syntax errors (with line and column) and schema
        violations (with the dotted key)
    """
    try:
        with open(path, encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f'Failed to read configuration file "{path}": {e}')
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f'{path}:{e.lineno}:{e.colno}: {e.msg}')
    conf = from_dict(data)
    logger.info("Configuration loaded from %s", path)
    return conf


def dump_config(conf):
    """Canonical JSON text of the config"""
    return json.dumps(conf.to_dict(), indent=2, sort_keys=True) + '\n'


def save_config(conf, path):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(dump_config(conf))


def default_config_dict():
    return TrainConfig().to_dict()


def config_hash(model_config):
    """SHA-256 over the canonical JSON of the model config

    Checkpoints carry this hash so stages only chain between producers and
    consumers of the same architecture.
    """
    canonical = json.dumps(dataclasses.asdict(model_config), sort_keys=True,
                           separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


_MASK64 = (1 << 64) - 1


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed, *names):
    """Derive an independent seed for a named consumer of randomness

    Each name is folded in with splitmix64, e.g.
    ``derive_seed(7, 'supervised', 3)`` for epoch 3 of stage (b). Skipping a
    stage doesn't shift the seeds of the other stages.

    :rtype: int
    :return: non-negative 63-bit seed
    """
    state = seed & _MASK64
    for name in names:
        token = zlib.crc32(str(name).encode('utf-8'))
        state = _splitmix64(state ^ _splitmix64(token))
    return state >> 1
