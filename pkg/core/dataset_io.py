"""
Dataset manifest and raster I/O.

A manifest is a JSON array with one entry per section; raster paths are
relative to the manifest's directory (see docs/manifest.schema.json).
Images and label masks are 8-bit PNG, probability maps single-channel
float32 TIFF.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import tifffile
from retry import retry
from skimage import io as skio

from core.domain import BundleRegion, ProbabilityMap, Resolution, SectionRecord
from core.errors import DatasetIOError, ManifestError
from core.settings import data_root

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
MASK_KEYS = ('tissue_mask', 'wm_mask', 'ventricle_mask')
LABEL_KEYS = ('charting', 'oracle_charting')


class Guardrails:
    """Validators for manifests and section records read from disk."""

    REQUIRED_FIELDS = ('id', 'macaque_id', 'rostrocaudal_index', 'image', 'resolution', 'charted')
    VALID_SPLITS = ('train', 'test')

    @staticmethod
    def validate_entry(entry: Dict[str, Any]) -> List[str]:
        issues = []
        if not isinstance(entry, dict):
            return ['entry is not an object']
        for key in Guardrails.REQUIRED_FIELDS:
            if key not in entry:
                issues.append(f"missing field '{key}'")
        if issues:
            return issues

        if not isinstance(entry['id'], str) or not entry['id']:
            issues.append("'id' must be a non-empty string")
        if not isinstance(entry['rostrocaudal_index'], int) or isinstance(entry['rostrocaudal_index'], bool):
            issues.append("'rostrocaudal_index' must be an integer")
        if not isinstance(entry['charted'], bool):
            issues.append("'charted' must be a boolean")
        elif entry['charted'] != bool(entry.get('charting')):
            issues.append("'charting' path must be present iff 'charted' is true")

        resolution = entry['resolution']
        if not isinstance(resolution, dict):
            issues.append("'resolution' must be an object")
        else:
            for key in ('microns_per_pixel', 'section_gap_um'):
                value = resolution.get(key)
                if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
                    issues.append(f"'resolution.{key}' must be a positive number")

        for key in ('image',) + MASK_KEYS + LABEL_KEYS:
            value = entry.get(key)
            if value is not None and not isinstance(value, str):
                issues.append(f"'{key}' must be a relative path string or null")
        if entry.get('split', 'train') not in Guardrails.VALID_SPLITS:
            issues.append(f"'split' must be one of {Guardrails.VALID_SPLITS}")
        return issues

    @staticmethod
    def validate_manifest(entries: Any) -> List[str]:
        if not isinstance(entries, list):
            return ['manifest must be a JSON array']
        issues = []
        seen = set()
        for position, entry in enumerate(entries):
            for issue in Guardrails.validate_entry(entry):
                issues.append(f"entry {position}: {issue}")
            if isinstance(entry, dict) and entry.get('id') in seen:
                issues.append(f"entry {position}: duplicate id {entry.get('id')!r}")
            if isinstance(entry, dict):
                seen.add(entry.get('id'))
        return issues


def resolve_manifest_path(path: Path) -> Path:
    """Relative paths fall back to FIBERDETECT_DATA_ROOT; a directory means its manifest.json."""
    path = Path(path)
    if not path.exists() and not path.is_absolute():
        path = data_root() / path
    if path.is_dir():
        path = path / MANIFEST_NAME
    return path


def read_manifest(path: Path) -> List[Dict[str, Any]]:
    path = resolve_manifest_path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            entries = json.load(f)
    except FileNotFoundError as e:
        raise DatasetIOError(f"manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e

    issues = Guardrails.validate_manifest(entries)
    if issues:
        raise ManifestError(f"manifest {path} failed validation: " + '; '.join(issues[:10]))
    return entries


def _read_png(path: Path) -> np.ndarray:
    try:
        return skio.imread(str(path))
    except (OSError, ValueError) as e:
        raise DatasetIOError(f"cannot read raster {path}: {e}") from e


def load_section(entry: Dict[str, Any], base_dir: Path) -> SectionRecord:
    base_dir = Path(base_dir)

    def optional(key, as_labels=False):
        rel = entry.get(key)
        if not rel:
            return None
        raster = _read_png(base_dir / rel)
        if raster.ndim == 3:
            raster = raster[..., 0]
        return raster.astype(np.uint8) if as_labels else raster > 0

    image = _read_png(base_dir / entry['image'])
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    image = image[..., :3].astype(np.uint8)

    return SectionRecord(
        id=entry['id'],
        macaque_id=entry['macaque_id'],
        rostrocaudal_index=int(entry['rostrocaudal_index']),
        image=image,
        resolution=Resolution(**entry['resolution']),
        charting=optional('charting', as_labels=True),
        tissue_mask=optional('tissue_mask'),
        wm_mask=optional('wm_mask'),
        ventricle_mask=optional('ventricle_mask'),
        charted=bool(entry['charted']),
        split=entry.get('split', 'train'),
        oracle_charting=optional('oracle_charting', as_labels=True),
    )


def load_sections(manifest_path: Path, split: Optional[str] = None) -> List[SectionRecord]:
    """Read every section of a manifest, sorted by (macaque, rostrocaudal index)."""
    manifest_path = resolve_manifest_path(manifest_path)
    entries = read_manifest(manifest_path)
    if split is not None:
        entries = [e for e in entries if e.get('split', 'train') == split]
    sections = [load_section(entry, manifest_path.parent) for entry in entries]
    sections.sort(key=lambda s: (s.macaque_id, s.rostrocaudal_index))
    logger.info(f"Loaded {len(sections)} sections from {manifest_path}")
    return sections


@retry(OSError, tries=3, delay=0.2, logger=logger)
def _write_png(path: Path, raster: np.ndarray) -> None:
    skio.imsave(str(path), raster, check_contrast=False)


def write_raster(path: Path, raster: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        _write_png(path, raster)
    except OSError as e:
        raise DatasetIOError(f"cannot write raster {path}: {e}") from e


def save_section(section: SectionRecord, out_dir: Path) -> Dict[str, Any]:
    """Write the rasters of one section and return its manifest entry."""
    out_dir = Path(out_dir)
    stem = section.id
    entry = {
        'id': section.id,
        'macaque_id': section.macaque_id,
        'rostrocaudal_index': int(section.rostrocaudal_index),
        'resolution': section.resolution.to_dict(),
        'charted': bool(section.charted),
        'split': section.split,
        'image': f"images/{stem}.png",
    }
    write_raster(out_dir / entry['image'], section.image)

    for key in LABEL_KEYS:
        labels = getattr(section, key)
        entry[key] = None
        if labels is not None:
            entry[key] = f"labels/{stem}_{key}.png"
            write_raster(out_dir / entry[key], labels.astype(np.uint8))

    for key in MASK_KEYS:
        mask = getattr(section, key)
        entry[key] = None
        if mask is not None:
            entry[key] = f"masks/{stem}_{key}.png"
            write_raster(out_dir / entry[key], mask.astype(np.uint8) * 255)
    return entry


def write_json(path: Path, payload: Any) -> Path:
    """Byte-stable JSON: sorted keys, two-space indent, trailing newline."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True, default=str)
            f.write('\n')
    except OSError as e:
        raise DatasetIOError(f"cannot write {path}: {e}") from e
    return path


def write_manifest(entries: Iterable[Dict[str, Any]], path: Path) -> Path:
    entries = list(entries)
    issues = Guardrails.validate_manifest(entries)
    if issues:
        raise ManifestError('refusing to write invalid manifest: ' + '; '.join(issues[:10]))
    return write_json(path, entries)


def write_probability_map(prob_map: ProbabilityMap, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        tifffile.imwrite(str(path), prob_map.values.astype(np.float32))
    except OSError as e:
        raise DatasetIOError(f"cannot write probability map {path}: {e}") from e
    return path


def read_probability_map(path: Path, section_id: str = '') -> ProbabilityMap:
    try:
        values = tifffile.imread(str(path))
    except (OSError, ValueError) as e:
        raise DatasetIOError(f"cannot read probability map {path}: {e}") from e
    return ProbabilityMap(np.asarray(values, dtype=np.float32), section_id)


def write_regions(regions: List[BundleRegion], path: Path, section_id: str) -> Path:
    payload = {'section_id': section_id, 'regions': [r.to_dict() for r in regions]}
    return write_json(path, payload)


def read_regions(path: Path) -> List[BundleRegion]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetIOError(f"cannot read regions {path}: {e}") from e
    return [BundleRegion.from_dict(item) for item in payload.get('regions', [])]
