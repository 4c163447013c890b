# tools/metrics.py
"""
Detection metrics: region matching, TPR per severity, false positives per
section, fiber density of a region and FROC analysis.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from core.domain import BundleRegion, ProbabilityMap, Resolution, SectionRecord, Severity
from core.errors import DegenerateRegionError, MatchError
from core.geometry import connected_components

logger = logging.getLogger(__name__)

MATCH_RULES = ('any_overlap', 'iou_threshold')
DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 20))
OPERATING_THRESHOLD = 0.4
CLAHE_CLIP_LIMIT = 2.0
CLAHE_TILE_GRID = (8, 8)
FIBER_PERCENTILE = 95.0

GroundTruth = Tuple[List[BundleRegion], List[BundleRegion]]
RegionPipeline = Callable[[int, List[BundleRegion]], List[BundleRegion]]


@dataclass(frozen=True)
class MatchConfig:
    match_rule: str = 'any_overlap'
    iou_min: float = 0.1

    def __post_init__(self):
        if self.match_rule not in MATCH_RULES:
            raise ValueError(f"match_rule must be one of {MATCH_RULES}, got {self.match_rule!r}")
        if not 0.0 < self.iou_min <= 1.0:
            raise ValueError(f"iou_min must be in (0, 1], got {self.iou_min}")


@dataclass
class MatchResult:
    """Matching outcome for one section."""

    dense_hits: List[bool] = field(default_factory=list)
    moderate_hits: List[bool] = field(default_factory=list)
    false_positives: List[BundleRegion] = field(default_factory=list)
    # (severity, gt index, predicted index) for every matching pair
    pairs: List[Tuple[Severity, int, int]] = field(default_factory=list)

    @property
    def tp_dense(self) -> int:
        return int(sum(self.dense_hits))

    @property
    def tp_moderate(self) -> int:
        return int(sum(self.moderate_hits))

    @property
    def n_fp(self) -> int:
        return len(self.false_positives)


@dataclass(frozen=True)
class FrocPoint:
    threshold: float
    tpr_dense: Optional[float]
    tpr_moderate: Optional[float]
    fp_per_section: float
    tpr_all: Optional[float] = None

    @property
    def tpr(self) -> float:
        """Sensitivity over every GT bundle (mean of the per-severity rates when not recorded)."""
        if self.tpr_all is not None:
            return self.tpr_all
        rates = [r for r in (self.tpr_dense, self.tpr_moderate) if r is not None]
        return float(np.mean(rates)) if rates else 0.0

    def to_dict(self) -> Dict[str, Optional[float]]:
        return asdict(self)


def _pixel_keys(region: BundleRegion) -> np.ndarray:
    return np.unique(region.pixels[:, 0] * (1 << 32) + region.pixels[:, 1])


def overlap_stats(a: BundleRegion, b: BundleRegion) -> Tuple[int, float]:
    """(intersection pixel count, IoU)."""
    ka, kb = _pixel_keys(a), _pixel_keys(b)
    inter = int(np.intersect1d(ka, kb, assume_unique=True).size)
    union = ka.size + kb.size - inter
    return inter, inter / union if union else 0.0


def regions_match(pred: BundleRegion, gt: BundleRegion, mc: MatchConfig) -> bool:
    lo_p, hi_p = pred.pixels.min(axis=0), pred.pixels.max(axis=0)
    lo_g, hi_g = gt.pixels.min(axis=0), gt.pixels.max(axis=0)
    if (hi_p < lo_g).any() or (hi_g < lo_p).any():
        return False
    inter, iou = overlap_stats(pred, gt)
    if mc.match_rule == 'any_overlap':
        return inter > 0
    return iou >= mc.iou_min


def match_regions(predicted: Sequence[BundleRegion], gt_dense: Sequence[BundleRegion],
                  gt_moderate: Sequence[BundleRegion], mc: MatchConfig = MatchConfig()) -> MatchResult:
    """
    A GT bundle is hit when any prediction matches it; a prediction matching
    no GT bundle of either severity is a false positive. One prediction may
    hit several GT bundles, each GT bundle counts once.
    """
    result = MatchResult(dense_hits=[False] * len(gt_dense), moderate_hits=[False] * len(gt_moderate))
    matched_pred = [False] * len(predicted)
    for severity, gts, hits in ((Severity.DENSE, gt_dense, result.dense_hits),
                                (Severity.MODERATE, gt_moderate, result.moderate_hits)):
        for gi, gt in enumerate(gts):
            for pi, pred in enumerate(predicted):
                if regions_match(pred, gt, mc):
                    hits[gi] = True
                    matched_pred[pi] = True
                    result.pairs.append((severity, gi, pi))
    result.false_positives = [p for p, m in zip(predicted, matched_pred) if not m]
    return result


def _as_list(matches) -> List[MatchResult]:
    return [matches] if isinstance(matches, MatchResult) else list(matches)


def tpr(matches, severity: Severity = Severity.DENSE) -> Optional[float]:
    """Hit GT bundles over all GT bundles of ``severity``; None when there are none."""
    hits = []
    for m in _as_list(matches):
        hits.extend(m.dense_hits if Severity(severity) == Severity.DENSE else m.moderate_hits)
    if not hits:
        return None
    return sum(hits) / len(hits)


def tpr_all(matches) -> Optional[float]:
    hits = []
    for m in _as_list(matches):
        hits.extend(m.dense_hits)
        hits.extend(m.moderate_hits)
    return sum(hits) / len(hits) if hits else None


def fp_avg(matches, n_sections: Optional[int] = None) -> float:
    matches = _as_list(matches)
    n_sections = len(matches) if n_sections is None else n_sections
    if n_sections < 1:
        raise ValueError("fp_avg needs at least one section")
    return sum(m.n_fp for m in matches) / n_sections


def fiber_binary_map(section: SectionRecord, region: BundleRegion) -> np.ndarray:
    """
    Binarized fiber pixels over the region's bounding box: grayscale crop
    (inverted so fibers are bright), CLAHE, then strictly above the 95th
    percentile of the enhanced crop.
    """
    r0, c0, r1, c1 = region.bbox
    h, w = section.shape
    if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
        raise DegenerateRegionError(f"region bbox {region.bbox} exceeds section {section.id} {section.shape}")
    if r1 - r0 < 2 or c1 - c0 < 2:
        raise DegenerateRegionError(f"region bbox {region.bbox} is one pixel wide")

    gray = section.grayscale()[r0:r1, c0:c1]
    inverted = np.round((1.0 - gray) * 255.0).astype(np.uint8)
    clahe = cv2.createCLAHE(clipLimit=CLAHE_CLIP_LIMIT, tileGridSize=CLAHE_TILE_GRID)
    enhanced = clahe.apply(inverted)
    return enhanced > np.percentile(enhanced, FIBER_PERCENTILE)


def fib_dens(section: SectionRecord, region: BundleRegion) -> float:
    """Fraction of the region's pixels that are binarized fiber pixels."""
    binary = fiber_binary_map(section, region)
    r0, c0, _, _ = region.bbox
    inside = binary[region.pixels[:, 0] - r0, region.pixels[:, 1] - c0]
    return float(inside.sum()) / region.size


def delta_fib_dens(manual_region: BundleRegion, predicted_region: BundleRegion,
                   section: SectionRecord) -> float:
    """(fib_dens(manual) - fib_dens(predicted)) in percent; negative when the prediction holds more fibers."""
    inter, _ = overlap_stats(manual_region, predicted_region)
    if inter == 0:
        raise MatchError("delta_fib_dens needs a matched (overlapping) pair of regions")
    return (fib_dens(section, manual_region) - fib_dens(section, predicted_region)) * 100.0


def regions_at(prob_map: ProbabilityMap, threshold: float,
               resolution: Optional[Resolution] = None) -> List[BundleRegion]:
    return connected_components(prob_map.threshold(threshold), resolution, probabilities=prob_map.values)


def froc_curve(prob_maps: Sequence[ProbabilityMap], gts: Sequence[GroundTruth],
               thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
               pipeline: Optional[RegionPipeline] = None,
               mc: MatchConfig = MatchConfig(),
               resolutions: Optional[Sequence[Resolution]] = None) -> List[FrocPoint]:
    """
    One point per threshold: threshold -> regions -> optional ``pipeline``
    (called with the section position and its regions) -> matching.
    """
    if len(thresholds) < 2:
        raise ValueError("froc_curve needs at least two thresholds")
    if len(prob_maps) != len(gts):
        raise ValueError(f"{len(prob_maps)} probability maps for {len(gts)} ground truths")
    resolutions = list(resolutions) if resolutions is not None else [Resolution()] * len(prob_maps)

    points = []
    for threshold in sorted(float(t) for t in thresholds):
        matches = []
        for index, (prob_map, (dense, moderate)) in enumerate(zip(prob_maps, gts)):
            regions = regions_at(prob_map, threshold, resolutions[index])
            if pipeline is not None:
                regions = pipeline(index, regions)
            matches.append(match_regions(regions, dense, moderate, mc))
        points.append(FrocPoint(
            threshold=threshold,
            tpr_dense=tpr(matches, Severity.DENSE),
            tpr_moderate=tpr(matches, Severity.MODERATE),
            fp_per_section=fp_avg(matches, max(len(matches), 1)) if matches else 0.0,
            tpr_all=tpr_all(matches),
        ))
        logger.debug(f"FROC t={threshold:.2f}: tpr={points[-1].tpr:.3f} fp={points[-1].fp_per_section:.2f}")
    return points


def elbow(points: Sequence[FrocPoint]) -> FrocPoint:
    """
    Point farthest from the chord joining the curve's end points, with FP
    and TPR each rescaled to [0, 1]. Points are ordered by FP (stable).
    """
    if not points:
        raise ValueError("elbow of an empty curve")
    ordered = sorted(points, key=lambda p: p.fp_per_section)
    xy = np.array([[p.fp_per_section, p.tpr] for p in ordered], dtype=np.float64)
    span = xy.max(axis=0) - xy.min(axis=0)
    span[span == 0] = 1.0
    xy = (xy - xy.min(axis=0)) / span

    start, end = xy[0], xy[-1]
    chord = end - start
    length = np.hypot(*chord)
    if length == 0:
        return ordered[0]
    rel = xy - start
    distance = np.abs(chord[0] * rel[:, 1] - chord[1] * rel[:, 0]) / length
    return ordered[int(np.argmax(distance))]
