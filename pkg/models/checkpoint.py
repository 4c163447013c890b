# models/checkpoint.py
"""
Self-describing checkpoints: format version, network configs, a structure
hash and the named parameter tensors in one ``torch.save`` container.
"""

import hashlib
import json
import logging
import pickle
import zipfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import torch

from core.errors import CheckpointError, CheckpointVersionError, CorruptCheckpointError
from models.unet import ClassifierArmConfig, FiberNet, UNetConfig

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 'fiberdetect-ckpt/1'


def structure_hash(unet: UNetConfig, arm: Optional[ClassifierArmConfig],
                   state_dict: Dict[str, torch.Tensor]) -> str:
    """SHA-256 over the configs and every tensor's name, shape and dtype."""
    layout = {
        'unet': asdict(unet),
        'arm': asdict(arm) if arm is not None else None,
        'tensors': [[name, list(t.shape), str(t.dtype)] for name, t in state_dict.items()],
    }
    return hashlib.sha256(json.dumps(layout, sort_keys=True).encode('utf-8')).hexdigest()


@dataclass
class ModelParams:
    """Parameters of one network plus what is needed to rebuild it."""

    unet: UNetConfig
    arm: Optional[ClassifierArmConfig]
    state_dict: Dict[str, torch.Tensor]
    version: str = CHECKPOINT_VERSION
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: FiberNet, metadata: Optional[Dict[str, Any]] = None) -> 'ModelParams':
        state = OrderedDict((k, v.detach().cpu().clone()) for k, v in model.state_dict().items())
        return cls(model.unet_config, model.arm_config, state, metadata=dict(metadata or {}))

    @property
    def structure_hash(self) -> str:
        return structure_hash(self.unet, self.arm, self.state_dict)

    def build(self, device: Optional[torch.device] = None) -> FiberNet:
        model = FiberNet(self.unet, self.arm or ClassifierArmConfig(), with_classifier=self.arm is not None)
        model.load_state_dict(self.state_dict)
        return model.to(device or 'cpu')

    def to_payload(self) -> Dict[str, Any]:
        return {
            'version': self.version,
            'unet': asdict(self.unet),
            'arm': asdict(self.arm) if self.arm is not None else None,
            'structure_hash': self.structure_hash,
            'metadata': json.loads(json.dumps(self.metadata, default=str)),
            'state_dict': self.state_dict,
        }


def save_checkpoint(params, path: Path) -> Path:
    """Write a ``ModelParams`` (or a bare network) to ``path``."""
    if isinstance(params, FiberNet):
        params = ModelParams.from_model(params)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        torch.save(params.to_payload(), path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint saved to {path}")
    return path


def load_checkpoint(path: Path) -> ModelParams:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except (RuntimeError, EOFError, ValueError, pickle.UnpicklingError, zipfile.BadZipFile) as e:
        raise CorruptCheckpointError(f"checkpoint {path} is truncated or unreadable: {e}") from e

    if not isinstance(payload, dict) or 'state_dict' not in payload:
        raise CorruptCheckpointError(f"{path} is not a checkpoint")
    if payload.get('version') != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has version {payload.get('version')!r}, expected {CHECKPOINT_VERSION!r}"
        )

    unet = UNetConfig(**payload['unet'])
    arm_data = payload.get('arm')
    arm = None
    if arm_data is not None:
        arm_data = dict(arm_data)
        arm_data['fc_sizes'] = tuple(arm_data['fc_sizes'])
        arm = ClassifierArmConfig(**arm_data)
    params = ModelParams(unet, arm, OrderedDict(payload['state_dict']),
                         version=payload['version'], metadata=dict(payload.get('metadata') or {}))
    if params.structure_hash != payload.get('structure_hash'):
        raise CorruptCheckpointError(f"checkpoint {path} does not match its recorded structure hash")
    return params
