#
# Copyright (C) 2024 SSFER developers
# see the LICENSE file for license
#

"""Checkpoint container: JSON manifest plus a flat little-endian float32 blob"""

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
import json
import logging
import os
from typing import Any, Dict, Optional

from jsonschema import validate
from jsonschema.exceptions import ValidationError
import numpy as np
import torch

from . import constants
from .config import ModelConfig, config_hash
from .errors import CheckpointError, CheckpointMismatchError
from .model import build_model

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

SCHEMA_MANIFEST = {
    "$schema": "http://json-schema.org/draft-04/schema#",
    "title": "Checkpoint manifest",
    "type": "object",
    "properties": {
        "format_version": {"enum": [FORMAT_VERSION]},
        "stage": {"type": "string"},
        "epoch": {"type": "integer", "minimum": 0},
        "metrics": {"type": "object"},
        "model_config": {"type": "object"},
        "model_config_hash": {"type": "string"},
        "config": {"type": ["object", "null"]},
        "tensors": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string"},
                    "shape": {"type": "array",
                              "items": {"type": "integer", "minimum": 0}},
                    "offset": {"type": "integer", "minimum": 0},
                    "length": {"type": "integer", "minimum": 0},
                },
                "required": ["name", "shape", "offset", "length"],
                "additionalProperties": False,
            },
        },
    },
    "required": ["format_version", "stage", "epoch", "model_config",
                 "model_config_hash", "tensors"],
}


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    model_config: ModelConfig
    model_config_hash: str
    tensors: Dict[str, torch.Tensor] = field(repr=False)
    metrics: Dict[str, Any] = field(default_factory=dict)
    config: Optional[Dict[str, Any]] = None
    path: Optional[str] = None

    def build_model(self):
        """MaskedViT carrying the checkpoint weights"""
        model = build_model(self.model_config, 0)
        model.load_state_dict(self.tensors, strict=True)
        return model


def save_checkpoint(directory, model, stage, epoch, metrics=None, config=None):
    """Persist model weights and a manifest into directory

    :param str directory: created if missing
    :param MaskedViT model: weights to store
    :param str stage: producing stage (pretrain, supervised, semisup)
    :param int epoch: epochs completed
    :param dict metrics: metric summary
    :param dict config: run configuration snapshot
    :rtype: str
    :return: directory
    """
    os.makedirs(directory, exist_ok=True)
    index = []
    offset = 0
    blob_path = os.path.join(directory, constants.CHECKPOINT_BLOB)
    with open(blob_path, 'wb') as blob:
        for name, tensor in model.state_dict().items():
            array = tensor.detach().cpu().to(torch.float32).numpy()
            data = np.ascontiguousarray(array, dtype='<f4').tobytes()
            blob.write(data)
            index.append({
                'name': name,
                'shape': list(array.shape),
                'offset': offset,
                'length': int(array.size),
            })
            offset += len(data)

    manifest = {
        'format_version': FORMAT_VERSION,
        'stage': stage,
        'epoch': int(epoch),
        'metrics': metrics or {},
        'model_config': asdict(model.config),
        'model_config_hash': config_hash(model.config),
        'config': config,
        'tensors': index,
    }
    with open(os.path.join(directory, constants.CHECKPOINT_MANIFEST), 'w',
              encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info("Saved %s checkpoint (epoch %d) to %s", stage, epoch, directory)
    return directory


def load_checkpoint(directory):
    """Read a checkpoint written by save_checkpoint

    :rtype: Checkpoint
    :raises CheckpointError: when files are missing or inconsistent
    """
    manifest_path = os.path.join(directory, constants.CHECKPOINT_MANIFEST)
    blob_path = os.path.join(directory, constants.CHECKPOINT_BLOB)
    try:
        with open(manifest_path, encoding='utf-8') as f:
            manifest = json.load(f)
        with open(blob_path, 'rb') as f:
            blob = f.read()
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Failed to read checkpoint {directory}: {e}")
    try:
        validate(manifest, SCHEMA_MANIFEST)
    except ValidationError as e:
        raise CheckpointError(f"Invalid checkpoint manifest {manifest_path}: "
                              f"{e.message}")

    tensors = OrderedDict()
    for entry in manifest['tensors']:
        end = entry['offset'] + 4 * entry['length']
        if end > len(blob):
            raise CheckpointError(
                f"Tensor {entry['name']} exceeds the blob in {directory}")
        array = np.frombuffer(blob, dtype='<f4', count=entry['length'],
                              offset=entry['offset'])
        tensors[entry['name']] = torch.from_numpy(
            array.astype(np.float32).reshape(entry['shape']))

    model_config = ModelConfig(**manifest['model_config'])
    stored_hash = manifest['model_config_hash']
    if config_hash(model_config) != stored_hash:
        raise CheckpointError(
            f"Checkpoint {directory}: model config doesn't match its hash")
    logger.debug("Loaded %s checkpoint from %s", manifest['stage'], directory)
    return Checkpoint(
        stage=manifest['stage'],
        epoch=manifest['epoch'],
        model_config=model_config,
        model_config_hash=stored_hash,
        tensors=tensors,
        metrics=manifest.get('metrics', {}),
        config=manifest.get('config'),
        path=directory,
    )


def verify_compatible(checkpoint, model_config):
    """Refuse to chain a checkpoint into a stage with another architecture

    :raises CheckpointMismatchError: on config hash mismatch
    """
    expected = config_hash(model_config)
    if checkpoint.model_config_hash != expected:
        raise CheckpointMismatchError(
            f"Checkpoint {checkpoint.path or ''} was produced for model config "
            f"{checkpoint.model_config_hash[:12]}, expected {expected[:12]}",
            expected_hash=expected,
            found_hash=checkpoint.model_config_hash,
        )


def restore_model(checkpoint, model_config):
    """Model for model_config initialized from a compatible checkpoint"""
    verify_compatible(checkpoint, model_config)
    return checkpoint.build_model()


def checkpoint_from_model(model, stage, epoch=0, metrics=None):
    """In-memory Checkpoint of a model, for chaining stages without disk"""
    return Checkpoint(
        stage=stage,
        epoch=epoch,
        model_config=model.config,
        model_config_hash=config_hash(model.config),
        tensors={k: v.detach().clone().to(torch.float32)
                 for k, v in model.state_dict().items()},
        metrics=metrics or {},
    )
