# flows/inference_flow.py
"""Whole-section inference: tile, predict, stitch, threshold, label regions."""

import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm

from core.dataset_io import load_sections, write_json, write_probability_map, write_regions
from core.domain import BundleRegion, ProbabilityMap, SectionRecord
from core.errors import FiberDetectError
from core.geometry import connected_components
from models.checkpoint import load_checkpoint
from models.unet import FiberNet, padded_segment
from tools.tiling import TileSpec, stitch, tile_section

logger = logging.getLogger(__name__)

PROB_DIR = 'prob'
REGIONS_DIR = 'regions'
INDEX_NAME = 'predictions.json'


def predict_probabilities(model: FiberNet, section: SectionRecord, spec: TileSpec = TileSpec()) -> ProbabilityMap:
    """Stitched fiber probability map with the section's dimensions."""
    tiles = tile_section(section, spec)
    maps = [padded_segment(model, tile) for tile, _ in tiles]
    return stitch(maps, [origin for _, origin in tiles], section.shape, section.id)


def detect(prob_map: ProbabilityMap, section: SectionRecord,
           threshold: float) -> Tuple[np.ndarray, List[BundleRegion]]:
    mask = prob_map.threshold(threshold)
    return mask, connected_components(mask, section.resolution, probabilities=prob_map.values)


def predict_section(model: FiberNet, section: SectionRecord,
                    spec: TileSpec = TileSpec()) -> Tuple[ProbabilityMap, np.ndarray, List[BundleRegion]]:
    """Probability map, binary mask and regions (each with its mean probability)."""
    prob_map = predict_probabilities(model, section, spec)
    mask, regions = detect(prob_map, section, spec.threshold)
    return prob_map, mask, regions


def prob_path(out_dir: Path, section_id: str) -> Path:
    return Path(out_dir) / PROB_DIR / f"{section_id}.tif"


def regions_path(out_dir: Path, section_id: str) -> Path:
    return Path(out_dir) / REGIONS_DIR / f"{section_id}.json"


class InferenceFlow:
    """Runs a checkpoint over every section of a manifest and writes maps and regions."""

    def __init__(self, checkpoint: Path, out_dir: Path, spec: TileSpec = TileSpec(),
                 device: Optional[torch.device] = None):
        self.flow_id = f"inference_flow_{datetime.now().strftime('%Y%m%d_%H%M%S')}"
        self.checkpoint = Path(checkpoint)
        self.out_dir = Path(out_dir)
        self.spec = spec
        self.device = device or torch.device('cpu')
        self.model: Optional[FiberNet] = None
        self.flow_state: Dict[str, Any] = {
            'start_time': datetime.now().isoformat(),
            'sections': [],
            'written': {},
            'errors': [],
        }
        logger.info(f"Initializing InferenceFlow: {self.flow_id}")

    def load_model(self) -> Dict[str, Any]:
        """Step 1: rebuild the network from its checkpoint."""
        try:
            params = load_checkpoint(self.checkpoint)
            self.model = params.build(self.device)
            logger.info(f"Loaded checkpoint {self.checkpoint} ({params.structure_hash[:12]})")
            return {'status': 'success', 'structure_hash': params.structure_hash}
        except FiberDetectError as e:
            error_msg = f"Error loading checkpoint: {e}"
            logger.error(error_msg)
            self.flow_state['errors'].append(error_msg)
            return {'status': 'error', 'error': error_msg}

    def predict_all(self, sections: List[SectionRecord]) -> Dict[str, Any]:
        """Step 2: predict and persist every section."""
        if self.model is None:
            return {'status': 'error', 'error': 'model not loaded'}
        for section in tqdm(sections, desc='infer', unit='section'):
            try:
                prob_map, mask, regions = predict_section(self.model, section, self.spec)
                write_probability_map(prob_map, prob_path(self.out_dir, section.id))
                write_regions(regions, regions_path(self.out_dir, section.id), section.id)
                self.flow_state['written'][section.id] = {
                    'n_regions': len(regions),
                    'foreground_px': int(mask.sum()),
                }
                self.flow_state['sections'].append(section.id)
            except FiberDetectError as e:
                error_msg = f"Error predicting section {section.id}: {e}"
                logger.error(error_msg)
                self.flow_state['errors'].append(error_msg)
        status = 'success' if not self.flow_state['errors'] else 'error'
        return {'status': status, 'n_sections': len(self.flow_state['sections'])}

    def write_index(self) -> Path:
        payload = {
            'checkpoint': str(self.checkpoint),
            'threshold': self.spec.threshold,
            'tile_size': self.spec.tile_size,
            'overlap_px': self.spec.overlap_px,
            'sections': self.flow_state['written'],
        }
        return write_json(self.out_dir / INDEX_NAME, payload)

    def run(self, manifest: Path, split: Optional[str] = None) -> Dict[str, Any]:
        sections = load_sections(manifest, split=split)
        for step in (self.load_model, lambda: self.predict_all(sections)):
            result = step()
            if result['status'] != 'success':
                raise FiberDetectError('; '.join(self.flow_state['errors']))
        self.write_index()
        logger.info(f"Inference finished: {len(self.flow_state['sections'])} sections written to {self.out_dir}")
        return {'status': 'success', 'sections': list(self.flow_state['sections'])}
