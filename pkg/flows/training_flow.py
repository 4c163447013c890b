# flows/training_flow.py
"""
Two-phase training.

1. Pretraining on charted sections: focal loss on the segmentation head
   plus the contrastive loss on positive pairs through the classifier arm.
2. Temporal ensembling over the unlabeled sections: for the first
   ``p_np_epochs`` epochs their targets are the thresholded predictions of
   the pretrained model, afterwards the thresholded mean of the last ``r``
   epochs' predictions. Charted sections always keep their manual labels.
"""

import copy
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from core.dataset_io import load_sections
from core.domain import SectionRecord
from core.errors import EmptyDatasetError, FiberDetectError, ShapeMismatchError, TrainingError
from core.geometry import charted_regions
from core.settings import seed_everything
from flows.inference_flow import detect, predict_probabilities
from models.checkpoint import ModelParams, save_checkpoint
from models.unet import ClassifierArmConfig, FiberNet, UNetConfig, create_model
from tools.augmentations import (
    AugmentCounters,
    GeoAugConfig,
    PairAugConfig,
    PatchSample,
    PatchSampler,
    estimate_wm_band,
    geo_augment,
    positive_pair,
)
from tools.losses import ContrastiveParams, FocalParams, combined_loss, contrastive_loss, focal_loss
from tools.metrics import match_regions, tpr_all
from tools.tiling import TileSpec

logger = logging.getLogger(__name__)

TRAIN_LOG_NAME = 'train_log.jsonl'
PRETRAIN_CHECKPOINT = 'pretrain.ckpt'
MODEL_CHECKPOINT = 'model.ckpt'

Predictor = Callable[[FiberNet, SectionRecord], np.ndarray]


@dataclass
class TrainConfig:
    optimizer: str = 'adam'
    learning_rate: float = 1e-3
    adam_eps: float = 1e-8
    batch_size: int = 8
    pretrain_epochs: int = 100
    te_epochs: int = 100
    patience: int = 25
    r: int = 3
    pseudo_label_threshold: float = 0.5
    p_np_epochs: int = 3
    steps_per_epoch: int = 20
    patch_size: int = 256
    fiber_fraction: float = 0.5
    buffer_downsample: int = 4
    val_fraction: float = 0.1
    val_threshold: float = 0.4
    use_contrastive: bool = True
    use_te: bool = True
    deterministic: bool = False
    focal: FocalParams = field(default_factory=FocalParams)
    contrastive: ContrastiveParams = field(default_factory=ContrastiveParams)
    geo: GeoAugConfig = field(default_factory=GeoAugConfig)
    pair: PairAugConfig = field(default_factory=PairAugConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    arm: ClassifierArmConfig = field(default_factory=ClassifierArmConfig)
    tile: TileSpec = field(default_factory=TileSpec)

    def __post_init__(self):
        if self.optimizer != 'adam':
            raise ValueError(f"only the adam optimizer is supported, got {self.optimizer!r}")
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")
        if self.patience > self.te_epochs:
            raise ValueError(f"patience ({self.patience}) must not exceed te_epochs ({self.te_epochs})")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.patch_size % self.unet.divisor:
            raise ValueError(f"patch_size {self.patch_size} must be divisible by {self.unet.divisor}")
        if not 0.0 <= self.fiber_fraction <= 1.0:
            raise ValueError(f"fiber_fraction must be in [0, 1], got {self.fiber_fraction}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


class PredictionBuffer:
    """
    Per-section ring buffer of the last ``r`` probability maps.

    Maps are stored block-averaged by ``downsample`` and expanded back with
    nearest-neighbour upsampling.
    """

    def __init__(self, r: int = 3, downsample: int = 4):
        if r < 1:
            raise ValueError(f"r must be >= 1, got {r}")
        if downsample < 1:
            raise ValueError(f"downsample must be >= 1, got {downsample}")
        self.r = r
        self.downsample = downsample
        self._maps: Dict[str, Deque[Tuple[int, np.ndarray]]] = {}
        self._shapes: Dict[str, Tuple[int, int]] = {}

    def shrink(self, values: np.ndarray) -> np.ndarray:
        f = self.downsample
        values = np.asarray(values, dtype=np.float32)
        if f == 1:
            return values.copy()
        h, w = values.shape
        padded = np.pad(values, ((0, (-h) % f), (0, (-w) % f)), mode='edge')
        return padded.reshape(padded.shape[0] // f, f, padded.shape[1] // f, f).mean(axis=(1, 3))

    def expand(self, values: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
        f = self.downsample
        full = np.repeat(np.repeat(values, f, axis=0), f, axis=1) if f > 1 else values
        return full[:shape[0], :shape[1]]

    def push(self, section_id: str, epoch: int, prob_map: np.ndarray) -> None:
        prob_map = np.asarray(prob_map)
        if prob_map.ndim != 2:
            raise ShapeMismatchError(f"probability map must be 2-D, got {prob_map.shape}")
        shape = (int(prob_map.shape[0]), int(prob_map.shape[1]))
        known = self._shapes.setdefault(section_id, shape)
        if known != shape:
            raise ShapeMismatchError(f"section {section_id}: map shape {shape} differs from stored {known}")
        entries = self._maps.setdefault(section_id, deque(maxlen=self.r))
        if entries and epoch <= entries[-1][0]:
            raise ValueError(f"section {section_id}: epoch {epoch} is not after {entries[-1][0]}")
        entries.append((int(epoch), self.shrink(prob_map)))

    def entries(self, section_id: str) -> List[Tuple[int, np.ndarray]]:
        return list(self._maps.get(section_id, ()))

    def size(self, section_id: str) -> int:
        return len(self._maps.get(section_id, ()))

    @property
    def section_ids(self) -> List[str]:
        return list(self._maps)

    def shape(self, section_id: str) -> Tuple[int, int]:
        return self._shapes[section_id]

    def mean(self, section_id: str) -> np.ndarray:
        entries = self._maps.get(section_id)
        if not entries:
            raise TrainingError(f"prediction buffer holds no maps for section {section_id}")
        stacked = np.stack([values for _, values in entries])
        return self.expand(stacked.mean(axis=0), self._shapes[section_id])

    def stats(self) -> Dict[str, Any]:
        depths = [len(v) for v in self._maps.values()]
        return {
            'sections': len(self._maps),
            'max_depth': max(depths) if depths else 0,
            'epochs': sorted({e for v in self._maps.values() for e, _ in v}),
        }


def pseudo_label(buffer: PredictionBuffer, threshold: float = 0.5,
                 section_id: Optional[str] = None) -> np.ndarray:
    """Pixelwise mean of the buffered maps, binarized at ``>= threshold``."""
    if section_id is None:
        ids = buffer.section_ids
        if len(ids) != 1:
            raise TrainingError(f"section_id required for a buffer holding {len(ids)} sections")
        section_id = ids[0]
    return buffer.mean(section_id) >= threshold


def early_stopping(history: Sequence[float], patience: int) -> Tuple[bool, int]:
    """(stop, best epoch index); stop once ``patience`` epochs passed without improving the minimum."""
    if len(history) == 0:
        raise ValueError("early stopping needs a non-empty history")
    best = int(np.argmin(np.asarray(history, dtype=np.float64)))
    return (len(history) - 1 - best) >= patience, best


def build_te_targets(unlabeled: Sequence[SectionRecord], buffer: PredictionBuffer,
                     p_np: Dict[str, np.ndarray], te_epoch: int, cfg: TrainConfig) -> Dict[str, np.ndarray]:
    """
    Targets of the unlabeled sections for TE epoch ``te_epoch`` (1-based):
    the pretrained model's thresholded prediction during the first
    ``p_np_epochs`` epochs, the buffer's pseudo-label afterwards.
    """
    targets = {}
    for section in unlabeled:
        if te_epoch <= cfg.p_np_epochs:
            targets[section.id] = buffer.expand(p_np[section.id], section.shape) >= cfg.pseudo_label_threshold
        else:
            targets[section.id] = pseudo_label(buffer, cfg.pseudo_label_threshold, section.id)
    return targets


def split_validation(charted: Sequence[SectionRecord], val_fraction: float,
                     rng: np.random.Generator) -> Tuple[List[SectionRecord], List[SectionRecord]]:
    """(train, val) with at least one validation section; a lone section serves as both."""
    charted = list(charted)
    if not charted:
        raise EmptyDatasetError("no charted sections available for training")
    if len(charted) == 1:
        return charted, charted
    n_val = max(1, int(round(val_fraction * len(charted))))
    order = rng.permutation(len(charted))
    val = [charted[i] for i in sorted(order[:n_val])]
    train = [charted[i] for i in sorted(order[n_val:])]
    return train, val


class Trainer:
    """Optimization state shared by both phases."""

    def __init__(self, model: FiberNet, cfg: TrainConfig, rng: np.random.Generator,
                 device: Optional[torch.device] = None,
                 log_fn: Optional[Callable[[Dict[str, Any]], None]] = None):
        self.model = model
        self.cfg = cfg
        self.rng = rng
        self.device = device or torch.device('cpu')
        self.model.to(self.device)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, eps=cfg.adam_eps)
        self.counters = AugmentCounters()
        self.log_fn = log_fn
        self.history: List[Dict[str, Any]] = []
        self._bands: Dict[str, Tuple[float, float]] = {}

    def _band(self, section: SectionRecord) -> Tuple[float, float]:
        if self.cfg.pair.wm_mean_band is not None:
            return tuple(self.cfg.pair.wm_mean_band)
        if section.id not in self._bands:
            self._bands[section.id] = estimate_wm_band(section, self.cfg.pair.wm_band_std)
        return self._bands[section.id]

    def _to_tensor(self, arrays: List[np.ndarray]) -> torch.Tensor:
        return torch.from_numpy(np.stack(arrays)).to(self.device)

    def train_step(self, samples: List[PatchSample], sampler: PatchSampler) -> Dict[str, float]:
        cfg = self.cfg
        self.model.train()
        patches, masks = [], []
        for sample in samples:
            patch, mask = geo_augment(sample.patch, sample.mask, cfg.geo, self.rng)
            patches.append(np.ascontiguousarray(patch.transpose(2, 0, 1), dtype=np.float32))
            masks.append(mask.astype(np.float32))
        logits, _ = self.model(self._to_tensor(patches))
        seg = focal_loss(torch.sigmoid(logits[:, 0]), self._to_tensor(masks), cfg.focal)

        con = torch.zeros((), device=self.device)
        if cfg.use_contrastive:
            view_a, view_b = [], []
            for sample in samples:
                section = sampler.section(sample.section_id)
                a, b = positive_pair(section, sample.origin, cfg.pair, self.rng, cfg.patch_size,
                                     band=self._band(section), counters=self.counters)
                view_a.append(a.transpose(2, 0, 1))
                view_b.append(b.transpose(2, 0, 1))
            views = self._to_tensor([np.ascontiguousarray(v, dtype=np.float32) for v in view_a + view_b])
            con = contrastive_loss(self.model.embed(views), None, cfg.contrastive)
            loss = combined_loss(seg, con, cfg.contrastive)
        else:
            loss = combined_loss(seg, con, ContrastiveParams(tau=cfg.contrastive.tau, lambda_weight=0.0))

        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return {'loss': float(loss.detach()), 'seg_loss': float(seg.detach()), 'con_loss': float(con.detach())}

    def run_epoch(self, samplers: List[PatchSampler]) -> Dict[str, float]:
        """``steps_per_epoch`` optimizer steps, cycling through ``samplers``."""
        totals = {'loss': 0.0, 'seg_loss': 0.0, 'con_loss': 0.0}
        for step in range(self.cfg.steps_per_epoch):
            sampler = samplers[step % len(samplers)]
            fraction = sampler.feasible_fraction(self.cfg.fiber_fraction)
            samples = sampler.sample(self.cfg.batch_size, fraction, self.rng)
            for key, value in self.train_step(samples, sampler).items():
                totals[key] += value
        return {key: value / max(self.cfg.steps_per_epoch, 1) for key, value in totals.items()}

    def validate(self, val_sections: Sequence[SectionRecord]) -> Tuple[float, Optional[float]]:
        """Mean focal loss over whole validation sections and their region-level TPR."""
        losses, matches = [], []
        for section in val_sections:
            prob_map = predict_probabilities(self.model, section, self.cfg.tile)
            losses.append(float(focal_loss(prob_map.values, section.fiber_mask(), self.cfg.focal)))
            _, regions = detect(prob_map, section, self.cfg.val_threshold)
            dense, moderate = charted_regions(section.charting, section.resolution)
            matches.append(match_regions(regions, dense, moderate))
        return float(np.mean(losses)), tpr_all(matches)

    def record(self, entry: Dict[str, Any]) -> None:
        entry = dict(entry, augment=self.counters.to_dict())
        if not np.isfinite(entry.get('loss', 0.0)):
            raise TrainingError(f"non-finite training loss at {entry.get('phase')} epoch {entry.get('epoch')}")
        self.history.append(entry)
        if self.log_fn is not None:
            self.log_fn(entry)

    def snapshot(self) -> Dict[str, torch.Tensor]:
        return copy.deepcopy(self.model.state_dict())


def pretrain(model: FiberNet, labeled_sections: Sequence[SectionRecord], cfg: TrainConfig,
             rng: np.random.Generator, val_sections: Optional[Sequence[SectionRecord]] = None,
             device: Optional[torch.device] = None,
             log_fn: Optional[Callable[[Dict[str, Any]], None]] = None) -> Tuple[ModelParams, List[Dict[str, Any]]]:
    """Supervised training on charted sections; keeps the best-validation weights."""
    charted = [s for s in labeled_sections if s.charted]
    if not charted:
        raise EmptyDatasetError("pretraining needs at least one charted section")
    if val_sections is None:
        charted, val_sections = split_validation(charted, cfg.val_fraction, rng)

    trainer = Trainer(model, cfg, rng, device, log_fn)
    sampler = PatchSampler(charted, cfg.patch_size)
    best_loss, best_state = np.inf, trainer.snapshot()
    logger.info(f"Pretraining on {len(charted)} charted sections for {cfg.pretrain_epochs} epochs")
    for epoch in tqdm(range(1, cfg.pretrain_epochs + 1), desc='pretrain', unit='epoch'):
        losses = trainer.run_epoch([sampler])
        val_loss, val_tpr = trainer.validate(val_sections)
        trainer.record(dict(phase='pretrain', epoch=epoch, val_loss=val_loss, val_tpr=val_tpr, **losses))
        if val_loss < best_loss:
            best_loss, best_state = val_loss, trainer.snapshot()

    model.load_state_dict(best_state)
    return ModelParams.from_model(model, {'phase': 'pretrain', 'best_val_loss': best_loss}), trainer.history


def te_train(model: FiberNet, all_sections: Sequence[SectionRecord], cfg: TrainConfig,
             rng: np.random.Generator, val_sections: Optional[Sequence[SectionRecord]] = None,
             device: Optional[torch.device] = None, predictor: Optional[Predictor] = None,
             log_fn: Optional[Callable[[Dict[str, Any]], None]] = None,
             target_hook: Optional[Callable[[int, Dict[str, np.ndarray]], None]] = None
             ) -> Tuple[ModelParams, List[Dict[str, Any]]]:
    """Temporal-ensembling phase; ``model`` must hold the pretrained weights."""
    charted = [s for s in all_sections if s.charted]
    unlabeled = [s for s in all_sections if not s.charted]
    if val_sections is None:
        charted, val_sections = split_validation(charted, cfg.val_fraction, rng)
    if not unlabeled:
        logger.warning("No unlabeled sections: temporal ensembling degenerates to supervised training")

    def default_predictor(net: FiberNet, section: SectionRecord) -> np.ndarray:
        return predict_probabilities(net, section, cfg.tile).values

    predictor = predictor or default_predictor
    trainer = Trainer(model, cfg, rng, device, log_fn)
    labeled_sampler = PatchSampler(charted, cfg.patch_size)
    buffer = PredictionBuffer(cfg.r, cfg.buffer_downsample)
    p_np: Dict[str, np.ndarray] = {}
    val_losses: List[float] = []
    best_state = trainer.snapshot()

    logger.info(f"Temporal ensembling: {len(charted)} charted, {len(unlabeled)} unlabeled sections")
    for epoch in tqdm(range(1, cfg.te_epochs + 1), desc='te', unit='epoch'):
        for section in unlabeled:
            prediction = predictor(model, section)
            buffer.push(section.id, epoch, prediction)
            if epoch == 1:
                p_np[section.id] = buffer.shrink(prediction)

        samplers = [labeled_sampler]
        source = None
        if unlabeled:
            targets = build_te_targets(unlabeled, buffer, p_np, epoch, cfg)
            source = 'p_np' if epoch <= cfg.p_np_epochs else 'pseudo_label'
            if target_hook is not None:
                target_hook(epoch, targets)
            samplers.append(PatchSampler(unlabeled, cfg.patch_size, targets=targets))

        losses = trainer.run_epoch(samplers)
        val_loss, val_tpr = trainer.validate(val_sections)
        val_losses.append(val_loss)
        trainer.record(dict(phase='te', epoch=epoch, val_loss=val_loss, val_tpr=val_tpr,
                            target_source=source, buffer=buffer.stats(), **losses))

        stop, best = early_stopping(val_losses, cfg.patience)
        if best == len(val_losses) - 1:
            best_state = trainer.snapshot()
        if stop:
            logger.info(f"Early stopping at TE epoch {epoch}; best epoch {best + 1}")
            break

    model.load_state_dict(best_state)
    best = int(np.argmin(val_losses)) + 1 if val_losses else 0
    return ModelParams.from_model(model, {'phase': 'te', 'best_epoch': best}), trainer.history


class TrainingFlow:
    """Pretraining followed by temporal ensembling, with logs and checkpoints in ``out_dir``."""

    def __init__(self, cfg: TrainConfig, out_dir: Path, seed: int = 0,
                 device: Optional[torch.device] = None, predictor: Optional[Predictor] = None):
        self.flow_id = f"training_flow_{datetime.now().strftime('%Y%m%d_%H%M%S')}"
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.seed = seed
        self.device = device or torch.device('cpu')
        self.predictor = predictor
        self.model: Optional[FiberNet] = None
        self.flow_state: Dict[str, Any] = {
            'start_time': datetime.now().isoformat(),
            'n_charted': 0,
            'n_unlabeled': 0,
            'history': [],
            'checkpoints': {},
            'errors': [],
        }
        logger.info(f"Initializing TrainingFlow: {self.flow_id}")

    def _log(self, entry: Dict[str, Any]) -> None:
        self.flow_state['history'].append(entry)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / TRAIN_LOG_NAME, 'a', encoding='utf-8') as f:
            f.write(json.dumps(entry, sort_keys=True, default=str) + '\n')

    def _fail(self, step: str, error: Exception) -> Dict[str, Any]:
        error_msg = f"Error in {step}: {error}"
        logger.error(error_msg)
        self.flow_state['errors'].append(error_msg)
        return {'status': 'error', 'error': error_msg}

    def train_sections(self, sections: Sequence[SectionRecord], pretrain_only: bool = False) -> FiberNet:
        """Train a fresh network on ``sections``; raises on the first failed phase."""
        rng = seed_everything(self.seed, self.cfg.deterministic)
        log_path = self.out_dir / TRAIN_LOG_NAME
        if log_path.exists():
            log_path.unlink()
        charted = [s for s in sections if s.charted]
        self.flow_state['n_charted'] = len(charted)
        self.flow_state['n_unlabeled'] = len(sections) - len(charted)
        train_charted, val = split_validation(charted, self.cfg.val_fraction, rng)
        self.model = create_model(self.cfg.unet, self.cfg.arm)

        result = self.run_pretrain(train_charted, val, rng)
        if result['status'] != 'success':
            raise TrainingError('; '.join(self.flow_state['errors']))
        if not pretrain_only and self.cfg.use_te:
            training = train_charted + [s for s in sections if not s.charted]
            result = self.run_te(training, val, rng)
            if result['status'] != 'success':
                raise TrainingError('; '.join(self.flow_state['errors']))
        self.save(MODEL_CHECKPOINT, 'final')
        return self.model

    def run_pretrain(self, charted: List[SectionRecord], val: List[SectionRecord],
                     rng: np.random.Generator) -> Dict[str, Any]:
        """Step 1: supervised pretraining."""
        try:
            params, history = pretrain(self.model, charted, self.cfg, rng, val, self.device, self._log)
            self.save(PRETRAIN_CHECKPOINT, 'pretrain')
            return {'status': 'success', 'epochs': len(history), 'best_val_loss': params.metadata['best_val_loss']}
        except FiberDetectError as e:
            return self._fail('pretraining', e)

    def run_te(self, sections: List[SectionRecord], val: List[SectionRecord],
               rng: np.random.Generator) -> Dict[str, Any]:
        """Step 2: temporal ensembling."""
        try:
            params, history = te_train(self.model, sections, self.cfg, rng, val, self.device,
                                       self.predictor, self._log)
            return {'status': 'success', 'epochs': len(history), 'best_epoch': params.metadata['best_epoch']}
        except FiberDetectError as e:
            return self._fail('temporal ensembling', e)

    def save(self, name: str, tag: str) -> Path:
        params = ModelParams.from_model(self.model, {'seed': self.seed, 'tag': tag})
        path = save_checkpoint(params, self.out_dir / name)
        self.flow_state['checkpoints'][tag] = str(path)
        return path

    def run(self, manifest: Path, pretrain_only: bool = False) -> Dict[str, Any]:
        sections = load_sections(manifest, split='train')
        if not sections:
            raise EmptyDatasetError(f"manifest {manifest} has no training sections")
        self.train_sections(sections, pretrain_only)
        logger.info(f"Training finished; checkpoints: {self.flow_state['checkpoints']}")
        return {
            'status': 'success',
            'checkpoints': dict(self.flow_state['checkpoints']),
            'epochs': len(self.flow_state['history']),
        }
