# flows/continuity_flow.py
"""
Rostrocaudal continuity filtering.

Sections of one animal are aligned by translation, downsampled into a
coarse stack and segmented along its three orthogonal planes to obtain a
crude prior of the main dense bundles. A detection survives when it lies
close to the prior of the neighbouring sections; afterwards small regions
and regions hugging the tissue outline are dropped.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Collection, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from skimage.measure import block_reduce
from tqdm import tqdm

from core.dataset_io import load_sections, read_regions, write_json, write_raster, write_regions
from core.domain import LABEL_DENSE, BundleRegion, Resolution, SectionRecord
from core.errors import EmptyDatasetError, FiberDetectError, PriorModelError, ShapeMismatchError
from core.geometry import disk, distance_transform, tissue_mask_of, translate
from flows.inference_flow import regions_path
from models.checkpoint import ModelParams, load_checkpoint, save_checkpoint
from models.unet import FiberNet, create_prior_model, padded_segment, to_batch
from tools.losses import FocalParams, focal_loss

logger = logging.getLogger(__name__)

LANDMARK_MODES = ('ventricle_centroid', 'lateral_edges')
DISTANCE_MODES = ('min_pixel', 'centroid')
PLANES = ('coronal', 'axial', 'sagittal')
SUMMARY_NAME = 'continuity.json'
PRIOR_DIR = 'priors'


@dataclass
class PriorConfig:
    downsample: int = 10
    base_width: int = 16
    depth: int = 3
    epochs: int = 30
    learning_rate: float = 1e-3
    threshold: float = 0.5
    oracle_dilation_um: float = 50.0
    focal: FocalParams = field(default_factory=FocalParams)

    def __post_init__(self):
        if self.downsample < 1:
            raise ValueError(f"downsample must be >= 1, got {self.downsample}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class ContinuityConfig:
    max_distance_um: float = 200.0
    distance_mode: str = 'min_pixel'
    min_area_mm2: float = 2.0
    outline_margin_mm: float = 1.0
    prior: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        if self.distance_mode not in DISTANCE_MODES:
            raise ValueError(f"distance_mode must be one of {DISTANCE_MODES}, got {self.distance_mode!r}")
        if self.max_distance_um < 0 or self.min_area_mm2 < 0 or self.outline_margin_mm < 0:
            raise ValueError("continuity distances and areas must be >= 0")


@dataclass
class StackAlignment:
    """Integer (dy, dx) per section moving its landmark onto the reference section's."""

    section_ids: List[str]
    translations: List[Tuple[int, int]]
    landmark: str
    downsample_factor: int = 10
    canvas_shape: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        if len(self.section_ids) != len(self.translations):
            raise ValueError("one translation per section is required")
        if self.landmark not in LANDMARK_MODES:
            raise ValueError(f"landmark must be one of {LANDMARK_MODES}, got {self.landmark!r}")

    def translation_of(self, section_id: str) -> Tuple[int, int]:
        return self.translations[self.section_ids.index(section_id)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'landmark': self.landmark,
            'downsample_factor': self.downsample_factor,
            'translations': {sid: list(t) for sid, t in zip(self.section_ids, self.translations)},
        }


@dataclass
class PriorMap:
    """Binary dense-bundle prior in its section's own frame."""

    section_id: str
    mask: np.ndarray
    translation: Tuple[int, int] = (0, 0)
    source: str = 'model'

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ShapeMismatchError(f"prior of {self.section_id} must be 2-D, got {self.mask.shape}")

    def to_frame(self, translation: Tuple[int, int], shape: Tuple[int, int]) -> np.ndarray:
        """The prior expressed in the frame of another section with ``translation`` and ``shape``."""
        h = max(shape[0], self.mask.shape[0])
        w = max(shape[1], self.mask.shape[1])
        canvas = np.zeros((h, w), dtype=bool)
        canvas[:self.mask.shape[0], :self.mask.shape[1]] = self.mask
        dy = self.translation[0] - translation[0]
        dx = self.translation[1] - translation[1]
        return translate(canvas, dy, dx, fill=False)[:shape[0], :shape[1]]


def _fit(raster: np.ndarray, shape: Tuple[int, int], fill) -> np.ndarray:
    """Crop or pad (bottom/right, constant ``fill``) a raster to ``shape``."""
    out = np.full(tuple(shape) + raster.shape[2:], fill, dtype=raster.dtype)
    h, w = min(shape[0], raster.shape[0]), min(shape[1], raster.shape[1])
    out[:h, :w] = raster[:h, :w]
    return out


def _mask_centroid(mask: np.ndarray) -> Optional[np.ndarray]:
    if mask is None or not mask.any():
        return None
    return np.argwhere(mask).mean(axis=0)


def _tissue_center(section: SectionRecord) -> np.ndarray:
    """Midpoint between the lateral (and dorsoventral) edges of the tissue bounding box."""
    tissue = tissue_mask_of(section)
    if not tissue.any():
        return np.array(section.shape, dtype=np.float64) / 2.0
    rows = np.flatnonzero(tissue.any(axis=1))
    cols = np.flatnonzero(tissue.any(axis=0))
    return np.array([(rows[0] + rows[-1]) / 2.0, (cols[0] + cols[-1]) / 2.0])


def align_sections(sections: Sequence[SectionRecord], downsample: int = 10) -> StackAlignment:
    """
    Translations aligning every section to the first one: ventricle centroids
    when every section has a ventricle, tissue bounding-box edges otherwise.
    """
    if not sections:
        raise EmptyDatasetError("cannot align an empty stack")
    centroids = [_mask_centroid(s.ventricle_mask) for s in sections]
    if all(c is not None for c in centroids):
        landmark, points = 'ventricle_centroid', centroids
    else:
        logger.warning(f"{sum(c is None for c in centroids)} sections lack a ventricle; aligning by lateral edges")
        landmark, points = 'lateral_edges', [_tissue_center(s) for s in sections]

    reference = points[0]
    translations = [tuple(int(v) for v in np.round(reference - p)) for p in points]
    canvas = (max(s.shape[0] for s in sections), max(s.shape[1] for s in sections))
    return StackAlignment([s.id for s in sections], translations, landmark, downsample, canvas)


def build_stack(sections: Sequence[SectionRecord], downsample: int = 10) -> Tuple[StackAlignment, np.ndarray]:
    """
    Aligned, block-averaged stack of shape (N, h, w, 3) in [0, 1]; sections
    must be sorted by rostrocaudal index. Uncovered area is white.
    """
    sections = list(sections)
    if not sections:
        raise EmptyDatasetError("build_stack needs at least one section")
    indices = [s.rostrocaudal_index for s in sections]
    if indices != sorted(indices):
        raise ValueError("sections must be sorted by rostrocaudal index")

    alignment = align_sections(sections, downsample)
    slices = []
    for section, (dy, dx) in zip(sections, alignment.translations):
        image = _fit(section.image.astype(np.float32) / 255.0, alignment.canvas_shape, 1.0)
        image = translate(image, dy, dx, fill=1.0)
        slices.append(block_reduce(image, (downsample, downsample, 1), np.mean, cval=1.0))
    volume = np.stack(slices).astype(np.float32)
    logger.info(f"Built {alignment.landmark}-aligned stack {volume.shape} from {len(sections)} sections")
    return alignment, volume


def _plane_slices(volume: np.ndarray, plane: str) -> List[np.ndarray]:
    if plane == 'coronal':
        return [volume[i] for i in range(volume.shape[0])]
    if plane == 'axial':
        return [volume[:, r] for r in range(volume.shape[1])]
    return [volume[:, :, c] for c in range(volume.shape[2])]


def _assemble(plane: str, maps: List[np.ndarray]) -> np.ndarray:
    if plane == 'coronal':
        return np.stack(maps, axis=0)
    if plane == 'axial':
        return np.stack(maps, axis=1)
    return np.stack(maps, axis=2)


def plane_probabilities(model: FiberNet, volume: np.ndarray) -> Dict[str, np.ndarray]:
    """One (N, h, w) probability volume per plane."""
    return {plane: _assemble(plane, [padded_segment(model, s) for s in _plane_slices(volume, plane)])
            for plane in PLANES}


def combine_planes(probabilities: Dict[str, np.ndarray], threshold: float = 0.5) -> np.ndarray:
    stacked = np.stack([probabilities[p] for p in PLANES])
    return stacked.mean(axis=0) >= threshold


def oracle_prior(section: SectionRecord, dilation_um: float = 50.0) -> np.ndarray:
    """Dense ground-truth bundles dilated by ``dilation_um``."""
    charting = section.reference_charting()
    if charting is None:
        return np.zeros(section.shape, dtype=bool)
    dense = charting == LABEL_DENSE
    radius = section.resolution.um_to_px(dilation_um)
    if radius < 1.0:
        return dense
    return ndimage.binary_dilation(dense, structure=disk(radius))


def triplanar_prior(sections: Sequence[SectionRecord], prior_model: Optional[FiberNet] = None,
                    cfg: PriorConfig = PriorConfig(), oracle: bool = False,
                    alignment: Optional[StackAlignment] = None,
                    volume: Optional[np.ndarray] = None) -> List[PriorMap]:
    """Per-section dense-bundle priors from the three-plane ensemble, or oracle priors."""
    sections = list(sections)
    if oracle:
        alignment = alignment or align_sections(sections, cfg.downsample)
        return [PriorMap(s.id, oracle_prior(s, cfg.oracle_dilation_um), t, 'oracle')
                for s, t in zip(sections, alignment.translations)]
    if prior_model is None:
        raise PriorModelError("no trained prior model; train one or use oracle priors")
    if alignment is None or volume is None:
        alignment, volume = build_stack(sections, cfg.downsample)

    binary = combine_planes(plane_probabilities(prior_model, volume), cfg.threshold)
    f = cfg.downsample
    priors = []
    for i, (section, (dy, dx)) in enumerate(zip(sections, alignment.translations)):
        full = np.repeat(np.repeat(binary[i], f, axis=0), f, axis=1)
        full = _fit(full, alignment.canvas_shape, False)
        own = translate(full, -dy, -dx, fill=False)[:section.shape[0], :section.shape[1]]
        priors.append(PriorMap(section.id, own, (dy, dx), 'model'))
    return priors


def _dense_targets(sections: Sequence[SectionRecord], alignment: StackAlignment, f: int) -> np.ndarray:
    targets = []
    for section, (dy, dx) in zip(sections, alignment.translations):
        dense = np.zeros(section.shape, dtype=np.float32)
        if section.charting is not None:
            dense = (section.charting == LABEL_DENSE).astype(np.float32)
        dense = translate(_fit(dense, alignment.canvas_shape, 0.0), dy, dx, fill=0.0)
        targets.append(block_reduce(dense, (f, f), np.mean, cval=0.0) >= 0.5)
    return np.stack(targets)


def _padded_probs(model: FiberNet, image: np.ndarray) -> torch.Tensor:
    x = to_batch(image, next(model.parameters()).device)
    h, w = x.shape[-2:]
    divisor = model.unet_config.divisor
    pad_h, pad_w = (-h) % divisor, (-w) % divisor
    if pad_h or pad_w:
        mode = 'reflect' if pad_h < h and pad_w < w else 'replicate'
        x = F.pad(x, (0, pad_w, 0, pad_h), mode=mode)
    logits, _ = model(x)
    return torch.sigmoid(logits[0, 0, :h, :w])


def prior_training_sections(sections: Sequence[SectionRecord],
                            held_out: Collection[str] = ()) -> List[SectionRecord]:
    """Sections as the prior network may see them: test-split and held-out sections lose their charting."""
    held_out = set(held_out)
    return [s.without_charting() if s.charted and (s.split == 'test' or s.id in held_out) else s
            for s in sections]


def train_prior(sections: Sequence[SectionRecord], cfg: PriorConfig = PriorConfig(),
                rng: Optional[np.random.Generator] = None,
                device: Optional[torch.device] = None, held_out: Collection[str] = ()) -> ModelParams:
    """
    Fit the prior network on slices of all three planes of the downsampled
    stack; only voxels of charted training sections contribute to the loss.
    Test-split sections and the ids in ``held_out`` still feed the image
    volume but never their charting.
    """
    sections = prior_training_sections(sections, held_out)
    if not any(s.charted for s in sections):
        raise PriorModelError("prior training needs at least one charted section")
    rng = rng or np.random.default_rng(0)
    alignment, volume = build_stack(sections, cfg.downsample)
    targets = _dense_targets(sections, alignment, cfg.downsample)
    valid = np.broadcast_to(np.array([s.charted for s in sections])[:, None, None], targets.shape)

    model = create_prior_model(cfg.base_width, cfg.depth).to(device or 'cpu')
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    work = []
    for plane in PLANES:
        for image, target, mask in zip(_plane_slices(volume, plane), _plane_slices(targets, plane),
                                       _plane_slices(valid, plane)):
            if mask.any():
                work.append((image, target, mask))

    model.train()
    for epoch in tqdm(range(cfg.epochs), desc='prior', unit='epoch'):
        total = 0.0
        for k in rng.permutation(len(work)):
            image, target, mask = work[k]
            loss = focal_loss(_padded_probs(model, image), target, cfg.focal, valid_mask=mask)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
        logger.debug(f"Prior epoch {epoch + 1}: mean loss {total / max(len(work), 1):.5f}")
    logger.info(f"Trained prior network on {len(work)} slices over {cfg.epochs} epochs")
    return ModelParams.from_model(model, {'phase': 'prior', 'slices': len(work)})


def continuity_filter(regions: Sequence[BundleRegion], section_index: int,
                      priors: Sequence[Optional[PriorMap]], resolution: Resolution = Resolution(),
                      cfg: ContinuityConfig = ContinuityConfig(),
                      shape: Optional[Tuple[int, int]] = None) -> List[BundleRegion]:
    """
    Keep the regions lying within ``max_distance_um`` of the averaged prior
    of the rostral and caudal neighbours. Two neighbours are averaged and
    thresholded at 0.5 (their union); one is used as-is; with none every
    region is kept.
    """
    regions = list(regions)
    own = priors[section_index]
    if own is None and shape is None:
        raise ValueError("the section's own prior or its shape is required")
    translation = own.translation if own is not None else (0, 0)
    shape = shape or own.mask.shape

    neighbours = [priors[j] for j in (section_index - 1, section_index + 1)
                  if 0 <= j < len(priors) and priors[j] is not None]
    if not neighbours:
        logger.warning(f"Section at stack position {section_index} has no neighbouring prior; keeping all regions")
        return regions

    masks = [p.to_frame(translation, shape).astype(np.float32) for p in neighbours]
    averaged = np.mean(masks, axis=0) >= 0.5
    distance = distance_transform(averaged, resolution)

    kept = []
    for region in regions:
        if cfg.distance_mode == 'centroid':
            r = int(np.clip(round(region.centroid[0]), 0, shape[0] - 1))
            c = int(np.clip(round(region.centroid[1]), 0, shape[1] - 1))
            d = distance[r, c]
        else:
            d = distance[region.pixels[:, 0], region.pixels[:, 1]].min()
        if d <= cfg.max_distance_um:
            kept.append(region)
    logger.debug(f"Continuity filter at position {section_index}: kept {len(kept)}/{len(regions)}")
    return kept


def outline_distance_um(section: SectionRecord) -> np.ndarray:
    """Distance in micrometres from each tissue pixel to the tissue boundary (0 outside tissue)."""
    tissue = np.pad(tissue_mask_of(section), 1, constant_values=False)
    step = section.resolution.microns_per_pixel
    return ndimage.distance_transform_edt(tissue, sampling=(step, step))[1:-1, 1:-1]


def postprocess(regions: Sequence[BundleRegion], section: SectionRecord,
                cfg: ContinuityConfig = ContinuityConfig(),
                outline: Optional[np.ndarray] = None) -> List[BundleRegion]:
    """Drop regions under ``min_area_mm2`` and regions whose centroid is near the tissue outline."""
    outline = outline_distance_um(section) if outline is None else outline
    margin_um = cfg.outline_margin_mm * 1000.0
    h, w = section.shape
    kept = []
    for region in regions:
        if region.area_mm2 < cfg.min_area_mm2:
            continue
        r = int(np.clip(round(region.centroid[0]), 0, h - 1))
        c = int(np.clip(round(region.centroid[1]), 0, w - 1))
        if outline[r, c] < margin_um:
            continue
        kept.append(region)
    return kept


def group_stacks(sections: Sequence[SectionRecord]) -> Dict[str, List[SectionRecord]]:
    """Sections per animal, sorted rostrocaudally."""
    stacks: Dict[str, List[SectionRecord]] = defaultdict(list)
    for section in sections:
        stacks[section.macaque_id].append(section)
    return {k: sorted(v, key=lambda s: s.rostrocaudal_index) for k, v in sorted(stacks.items())}


def compute_priors(sections: Sequence[SectionRecord], cfg: PriorConfig, oracle: bool = False,
                   prior_model: Optional[FiberNet] = None) -> Dict[str, Tuple[int, List[PriorMap]]]:
    """Priors of every stack, keyed by section id as (stack position, stack priors)."""
    by_section = {}
    for animal, stack in group_stacks(sections).items():
        priors = triplanar_prior(stack, prior_model, cfg, oracle)
        for position, section in enumerate(stack):
            by_section[section.id] = (position, priors)
        logger.info(f"Computed {len(priors)} {'oracle' if oracle else 'model'} priors for animal {animal}")
    return by_section


def filter_section(regions: Sequence[BundleRegion], section: SectionRecord,
                   priors: Dict[str, Tuple[int, List[PriorMap]]],
                   cfg: ContinuityConfig = ContinuityConfig(),
                   with_continuity: bool = True) -> List[BundleRegion]:
    """Continuity filter followed by postprocessing for one section."""
    regions = list(regions)
    if with_continuity:
        position, stack_priors = priors[section.id]
        regions = continuity_filter(regions, position, stack_priors, section.resolution, cfg, section.shape)
    return postprocess(regions, section, cfg)


class ContinuityFlow:
    """Filters the detections of an inference run and writes the surviving regions."""

    def __init__(self, cfg: ContinuityConfig, out_dir: Path, oracle: bool = False,
                 prior_checkpoint: Optional[Path] = None, train_prior_model: bool = False,
                 seed: int = 0, device: Optional[torch.device] = None):
        self.flow_id = f"continuity_flow_{datetime.now().strftime('%Y%m%d_%H%M%S')}"
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.oracle = oracle
        self.prior_checkpoint = Path(prior_checkpoint) if prior_checkpoint else None
        self.train_prior_model = train_prior_model
        self.seed = seed
        self.device = device or torch.device('cpu')
        self.prior_model: Optional[FiberNet] = None
        self.priors: Dict[str, Tuple[int, List[PriorMap]]] = {}
        self.flow_state: Dict[str, Any] = {
            'start_time': datetime.now().isoformat(),
            'sections': {},
            'errors': [],
        }
        logger.info(f"Initializing ContinuityFlow: {self.flow_id}")

    def _fail(self, step: str, error: Exception) -> Dict[str, Any]:
        error_msg = f"Error in {step}: {error}"
        logger.error(error_msg)
        self.flow_state['errors'].append(error_msg)
        return {'status': 'error', 'error': error_msg}

    def prepare_prior_model(self, sections: List[SectionRecord], held_out: Collection[str] = ()) -> Dict[str, Any]:
        """
        Step 1: load or train the prior network (skipped for oracle priors).
        Training never sees the charting of test-split sections or of ``held_out``.
        """
        if self.oracle:
            return {'status': 'success', 'source': 'oracle'}
        try:
            if self.prior_checkpoint is not None and self.prior_checkpoint.exists() and not self.train_prior_model:
                self.prior_model = load_checkpoint(self.prior_checkpoint).build(self.device)
                return {'status': 'success', 'source': str(self.prior_checkpoint)}
            if not self.train_prior_model:
                raise PriorModelError("no prior checkpoint given; pass a checkpoint, train one or use oracle priors")
            params = train_prior(sections, self.cfg.prior, np.random.default_rng(self.seed), self.device, held_out)
            save_checkpoint(params, self.out_dir / 'prior.ckpt')
            self.prior_model = params.build(self.device)
            return {'status': 'success', 'source': 'trained'}
        except FiberDetectError as e:
            return self._fail('prior model preparation', e)

    def compute(self, sections: List[SectionRecord]) -> Dict[str, Any]:
        """Step 2: priors for every stack."""
        try:
            self.priors = compute_priors(sections, self.cfg.prior, self.oracle, self.prior_model)
            for section_id, (position, stack) in self.priors.items():
                write_raster(self.out_dir / PRIOR_DIR / f"{section_id}.png",
                             stack[position].mask.astype(np.uint8) * 255)
            return {'status': 'success', 'n_priors': len(self.priors)}
        except FiberDetectError as e:
            return self._fail('prior computation', e)

    def filter_all(self, sections: List[SectionRecord], detections_dir: Path) -> Dict[str, Any]:
        """Step 3: filter every section that has detections."""
        for section in tqdm(sections, desc='filter', unit='section'):
            source = regions_path(detections_dir, section.id)
            if not source.exists():
                continue
            try:
                regions = read_regions(source)
                kept = filter_section(regions, section, self.priors, self.cfg)
                write_regions(kept, regions_path(self.out_dir, section.id), section.id)
                self.flow_state['sections'][section.id] = {'detected': len(regions), 'kept': len(kept)}
            except FiberDetectError as e:
                self._fail(f"filtering section {section.id}", e)
        if not self.flow_state['sections'] and not self.flow_state['errors']:
            return self._fail('filtering', EmptyDatasetError(f"no detections found under {detections_dir}"))
        return {'status': 'success' if not self.flow_state['errors'] else 'error'}

    def run(self, detections_dir: Path, manifest: Path) -> Dict[str, Any]:
        sections = load_sections(manifest)
        steps = (
            lambda: self.prepare_prior_model(sections),
            lambda: self.compute(sections),
            lambda: self.filter_all(sections, Path(detections_dir)),
        )
        for step in steps:
            result = step()
            if result['status'] != 'success':
                raise FiberDetectError('; '.join(self.flow_state['errors']))
        summary = {
            'oracle_prior': self.oracle,
            'max_distance_um': self.cfg.max_distance_um,
            'distance_mode': self.cfg.distance_mode,
            'min_area_mm2': self.cfg.min_area_mm2,
            'outline_margin_mm': self.cfg.outline_margin_mm,
            'sections': self.flow_state['sections'],
        }
        write_json(self.out_dir / SUMMARY_NAME, summary)
        removed = sum(v['detected'] - v['kept'] for v in self.flow_state['sections'].values())
        logger.info(f"Continuity filtering removed {removed} regions over {len(self.flow_state['sections'])} sections")
        return {'status': 'success', 'removed': removed, 'sections': list(self.flow_state['sections'])}
