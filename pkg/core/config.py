"""
Run configuration: merged module configs, seed and output directory.

Precedence is CLI flag > config file > built-in default. The merged
configuration is written to every output directory as ``run_config.json``,
next to ``run_manifest.json`` (input hashes, package versions).
"""

import copy
import hashlib
import json
import logging
import platform
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Type, TypeVar

import numpy as np
import torch

from core import __version__
from core.dataset_io import write_json
from core.errors import ConfigError, ManifestError

logger = logging.getLogger(__name__)

T = TypeVar('T')

RUN_CONFIG_NAME = 'run_config.json'
RUN_MANIFEST_NAME = 'run_manifest.json'


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = 'reports'
    version: str = __version__
    sections: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def section(self, name: str) -> Dict[str, Any]:
        return self.sections.get(name, {})

    def to_dict(self) -> Dict[str, Any]:
        return {'seed': self.seed, 'out_dir': self.out_dir, 'version': self.version,
                'sections': copy.deepcopy(self.sections)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'RunConfig':
        return cls(
            seed=int(data.get('seed', 0)),
            out_dir=str(data.get('out_dir', 'reports')),
            version=str(data.get('version', __version__)),
            sections=copy.deepcopy(dict(data.get('sections', {}))),
        )


def deep_merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def config_to_dict(config: Any) -> Dict[str, Any]:
    """asdict() that keeps tuples as lists so the result is JSON friendly."""
    return json.loads(json.dumps(asdict(config), default=str))


def config_from_dict(cls: Type[T], data: Optional[Mapping[str, Any]]) -> T:
    """Build a (possibly nested) config dataclass, ignoring unknown keys."""
    data = dict(data or {})
    kwargs = {}
    defaults = cls()
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        current = getattr(defaults, f.name)
        if is_dataclass(current) and isinstance(value, Mapping):
            value = config_from_dict(type(current), value)
        elif isinstance(current, tuple) and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


def load_config_file(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ManifestError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ManifestError(f"config file {path} must contain a JSON object")
    return data


def build_run_config(defaults: Dict[str, Any], file_config: Mapping[str, Any],
                     overrides: Mapping[str, Any]) -> RunConfig:
    merged = deep_merge(defaults, file_config)
    merged = deep_merge(merged, overrides)
    try:
        return RunConfig.from_dict(merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid run configuration: {e}") from e


def sha256_file(path: Path, chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(chunk_size), b''):
            digest.update(chunk)
    return digest.hexdigest()


def write_run_manifest(out_dir: Path, run_config: RunConfig, command: str,
                       inputs: Iterable[Path] = ()) -> Path:
    """Write run_config.json and run_manifest.json into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / RUN_CONFIG_NAME, run_config.to_dict())

    hashes = {}
    for path in inputs:
        path = Path(path)
        if path.is_file():
            hashes[str(path)] = sha256_file(path)
    manifest = {
        'command': command,
        'created': datetime.now().isoformat(timespec='seconds'),
        'inputs': hashes,
        'versions': {
            'fiberdetect': __version__,
            'python': platform.python_version(),
            'numpy': np.__version__,
            'torch': torch.__version__,
        },
    }
    path = write_json(out_dir / RUN_MANIFEST_NAME, manifest)
    logger.info(f"Run manifest written to {path}")
    return path
