# flows/evaluation_flow.py
"""
Quantitative evaluation of detections: per-section matching, aggregate
report, FROC analysis, the loss/training ablation and k-fold
cross-validation.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from core.dataset_io import load_sections, read_probability_map, read_regions, write_json, write_raster
from core.domain import BundleRegion, SectionRecord, Severity
from core.errors import DatasetIOError, DegenerateRegionError, EmptyDatasetError, FiberDetectError
from core.geometry import charted_regions
from flows.continuity_flow import ContinuityConfig, ContinuityFlow, filter_section
from flows.inference_flow import predict_section, prob_path, regions_path
from flows.training_flow import TrainConfig, TrainingFlow
from tools.chart_generator import plot_ablation, plot_boxplots, plot_froc, plot_froc_interactive
from tools.losses import FocalParams
from tools.metrics import (
    DEFAULT_THRESHOLDS,
    OPERATING_THRESHOLD,
    FrocPoint,
    MatchConfig,
    MatchResult,
    delta_fib_dens,
    elbow,
    fib_dens,
    fiber_binary_map,
    fp_avg,
    froc_curve,
    match_regions,
    tpr,
    tpr_all,
)

logger = logging.getLogger(__name__)

METRICS_NAME = 'metrics.json'
PER_SECTION_NAME = 'per_section.csv'
BOXPLOT_NAME = 'boxplots.svg'
FIBER_MAP_DIR = 'fiber_maps'

ABLATION_VARIANTS = ('ce', 'focal', 'focal+sscon', 'focal+sscon+te')
TABLE_COLUMNS = ('tpr_dense', 'tpr_moderate', 'abs_delta_dense', 'abs_delta_moderate', 'fp_avg')
CV_RATIO = (80, 13, 5)

SEVERITIES = (Severity.DENSE, Severity.MODERATE)


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


@dataclass
class SectionEvaluation:
    section_id: str
    matches: MatchResult
    deltas: Dict[str, List[float]] = field(default_factory=lambda: {'dense': [], 'moderate': []})
    gt_density: Dict[str, List[float]] = field(default_factory=lambda: {'dense': [], 'moderate': []})
    pred_density: Dict[str, List[float]] = field(default_factory=lambda: {'dense': [], 'moderate': []})

    def row(self) -> Dict[str, Any]:
        return {
            'section_id': self.section_id,
            'tpr_dense': tpr(self.matches, Severity.DENSE),
            'tpr_moderate': tpr(self.matches, Severity.MODERATE),
            'n_gt_dense': len(self.matches.dense_hits),
            'n_gt_moderate': len(self.matches.moderate_hits),
            'n_fp': self.matches.n_fp,
            'delta_fib_dens_dense': _mean(self.deltas['dense']),
            'delta_fib_dens_moderate': _mean(self.deltas['moderate']),
        }


@dataclass
class MetricsReport:
    """Aggregate detection metrics over a set of sections."""

    n_sections: int
    tpr_dense: Optional[float]
    tpr_moderate: Optional[float]
    tpr_all: Optional[float]
    fp_avg: float
    mean_delta: Dict[str, Optional[float]]
    mean_abs_delta: Dict[str, Optional[float]]
    fib_dens_gt: Dict[str, Optional[float]]
    fib_dens_pred: Dict[str, Optional[float]]
    per_section: List[Dict[str, Any]] = field(default_factory=list)
    match_config: Dict[str, Any] = field(default_factory=dict)
    froc: List[Dict[str, Any]] = field(default_factory=list)

    def table_row(self) -> Dict[str, Optional[float]]:
        return {
            'tpr_dense': self.tpr_dense,
            'tpr_moderate': self.tpr_moderate,
            'abs_delta_dense': self.mean_abs_delta['dense'],
            'abs_delta_moderate': self.mean_abs_delta['moderate'],
            'fp_avg': self.fp_avg,
        }

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def per_section_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.per_section, columns=list(SectionEvaluation('', MatchResult()).row()))


def evaluate_section(section: SectionRecord, predicted: Sequence[BundleRegion],
                     mc: MatchConfig = MatchConfig()) -> SectionEvaluation:
    """Match one section's regions against its charting and measure fiber density of matched pairs."""
    dense, moderate = charted_regions(section.reference_charting(), section.resolution)
    result = SectionEvaluation(section.id, match_regions(predicted, dense, moderate, mc))
    gts = {Severity.DENSE: dense, Severity.MODERATE: moderate}
    for severity, gi, pi in result.matches.pairs:
        key = severity.value
        try:
            result.deltas[key].append(delta_fib_dens(gts[severity][gi], predicted[pi], section))
            result.gt_density[key].append(fib_dens(section, gts[severity][gi]))
            result.pred_density[key].append(fib_dens(section, predicted[pi]))
        except DegenerateRegionError as e:
            logger.debug(f"Skipping fiber density of a {key} pair in {section.id}: {e}")
    return result


def evaluate(sections: Sequence[SectionRecord], predictions: Dict[str, Sequence[BundleRegion]],
             mc: MatchConfig = MatchConfig()) -> MetricsReport:
    """Aggregate report over ``sections``; a section without an entry in ``predictions`` has none."""
    sections = list(sections)
    if not sections:
        raise EmptyDatasetError("nothing to evaluate")
    evaluations = [evaluate_section(s, list(predictions.get(s.id, [])), mc) for s in sections]
    matches = [e.matches for e in evaluations]

    def pooled(attr: str, key: str) -> List[float]:
        return [v for e in evaluations for v in getattr(e, attr)[key]]

    keys = [s.value for s in SEVERITIES]
    return MetricsReport(
        n_sections=len(sections),
        tpr_dense=tpr(matches, Severity.DENSE),
        tpr_moderate=tpr(matches, Severity.MODERATE),
        tpr_all=tpr_all(matches),
        fp_avg=fp_avg(matches, len(sections)),
        mean_delta={k: _mean(pooled('deltas', k)) for k in keys},
        mean_abs_delta={k: _mean(np.abs(pooled('deltas', k))) for k in keys},
        fib_dens_gt={k: _mean(pooled('gt_density', k)) for k in keys},
        fib_dens_pred={k: _mean(pooled('pred_density', k)) for k in keys},
        per_section=[e.row() for e in evaluations],
        match_config=asdict(mc),
    )


def write_report(report: MetricsReport, out_dir: Path, with_plots: bool = True) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {'metrics': write_json(out_dir / METRICS_NAME, report.to_dict())}
    frame = report.per_section_frame()
    frame.to_csv(out_dir / PER_SECTION_NAME, index=False, float_format='%.6f', lineterminator='\n')
    paths['per_section'] = out_dir / PER_SECTION_NAME
    if with_plots:
        paths['boxplots'] = plot_boxplots(frame, out_dir / BOXPLOT_NAME)
    return paths


def export_fiber_maps(section: SectionRecord, regions: Sequence[BundleRegion], out_dir: Path) -> List[Path]:
    """Binarized fiber map of every region's bounding box as PNG."""
    written = []
    for k, region in enumerate(regions):
        try:
            binary = fiber_binary_map(section, region)
        except DegenerateRegionError as e:
            logger.debug(f"No fiber map for region {k} of {section.id}: {e}")
            continue
        path = Path(out_dir) / FIBER_MAP_DIR / f"{section.id}_{k:03d}.png"
        write_raster(path, binary.astype(np.uint8) * 255)
        written.append(path)
    return written


class EvaluationFlow:
    """Evaluates a prediction directory against the charted sections of a manifest."""

    def __init__(self, out_dir: Path, mc: MatchConfig = MatchConfig(), export_maps: bool = False,
                 prob_dir: Optional[Path] = None):
        self.flow_id = f"evaluation_flow_{datetime.now().strftime('%Y%m%d_%H%M%S')}"
        self.out_dir = Path(out_dir)
        self.mc = mc
        self.export_maps = export_maps
        self.prob_dir = Path(prob_dir) if prob_dir else None
        self.flow_state: Dict[str, Any] = {
            'start_time': datetime.now().isoformat(),
            'predictions': {},
            'report': None,
            'errors': [],
        }
        logger.info(f"Initializing EvaluationFlow: {self.flow_id}")

    def load_predictions(self, sections: List[SectionRecord], pred_dir: Path) -> Dict[str, Any]:
        """Step 1: read the regions of every evaluated section."""
        for section in sections:
            try:
                self.flow_state['predictions'][section.id] = read_regions(regions_path(pred_dir, section.id))
            except DatasetIOError as e:
                error_msg = f"Missing predictions for section {section.id}: {e}"
                logger.error(error_msg)
                self.flow_state['errors'].append(error_msg)
        status = 'success' if not self.flow_state['errors'] else 'error'
        return {'status': status, 'n_sections': len(self.flow_state['predictions'])}

    def froc_samples(self, sections: List[SectionRecord]) -> List[Dict[str, Any]]:
        """Unfiltered FROC points from the stored probability maps."""
        prob_maps = [read_probability_map(prob_path(self.prob_dir, s.id), s.id) for s in sections]
        gts = [charted_regions(s.reference_charting(), s.resolution) for s in sections]
        points = froc_curve(prob_maps, gts, DEFAULT_THRESHOLDS, None, self.mc, [s.resolution for s in sections])
        return [p.to_dict() for p in points]

    def score(self, sections: List[SectionRecord]) -> Dict[str, Any]:
        """Step 2: metrics, reports and plots."""
        try:
            report = evaluate(sections, self.flow_state['predictions'], self.mc)
            if self.prob_dir is not None:
                report.froc = self.froc_samples(sections)
            write_report(report, self.out_dir)
            if self.export_maps:
                for section in sections:
                    export_fiber_maps(section, self.flow_state['predictions'][section.id], self.out_dir)
            self.flow_state['report'] = report
            return {'status': 'success', 'report': report}
        except FiberDetectError as e:
            error_msg = f"Error scoring predictions: {e}"
            logger.error(error_msg)
            self.flow_state['errors'].append(error_msg)
            return {'status': 'error', 'error': error_msg}

    def run(self, pred_dir: Path, manifest: Path, split: Optional[str] = 'test') -> MetricsReport:
        sections = [s for s in load_sections(manifest, split=split) if s.reference_charting() is not None]
        if not sections:
            raise EmptyDatasetError(f"manifest {manifest} has no charted sections in split {split!r}")
        for step in (lambda: self.load_predictions(sections, Path(pred_dir)), lambda: self.score(sections)):
            result = step()
            if result['status'] != 'success':
                raise FiberDetectError('; '.join(self.flow_state['errors']))
        report = self.flow_state['report']
        logger.info(f"Evaluation: TPR dense={report.tpr_dense} moderate={report.tpr_moderate} FP_avg={report.fp_avg:.2f}")
        return report


def froc_table(points: Sequence[FrocPoint]) -> pd.DataFrame:
    return pd.DataFrame([p.to_dict() for p in points], columns=list(FrocPoint.__dataclass_fields__))


class FrocFlow:
    """FROC analysis over stored probability maps, optionally through the continuity pipeline."""

    def __init__(self, out_dir: Path, mc: MatchConfig = MatchConfig(),
                 thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                 continuity: Optional[ContinuityFlow] = None):
        self.flow_id = f"froc_flow_{datetime.now().strftime('%Y%m%d_%H%M%S')}"
        self.out_dir = Path(out_dir)
        self.mc = mc
        thresholds = sorted({round(float(t), 6) for t in thresholds} | {OPERATING_THRESHOLD})
        self.thresholds = thresholds
        self.continuity = continuity
        self.flow_state: Dict[str, Any] = {
            'start_time': datetime.now().isoformat(),
            'points': [],
            'errors': [],
        }
        logger.info(f"Initializing FrocFlow: {self.flow_id}")

    def pipeline(self, sections: List[SectionRecord], stack: List[SectionRecord]):
        if self.continuity is None:
            return None
        priors, cfg = stack_priors(self.continuity, stack), self.continuity.cfg
        return lambda index, regions: filter_section(regions, sections[index], priors, cfg)

    def run(self, prob_dir: Path, manifest: Path, split: Optional[str] = 'test') -> Dict[str, Any]:
        stack = load_sections(manifest)
        sections = [s for s in stack if (split is None or s.split == split) and s.reference_charting() is not None]
        if not sections:
            raise EmptyDatasetError(f"manifest {manifest} has no charted sections in split {split!r}")
        prob_maps = [read_probability_map(prob_path(prob_dir, s.id), s.id) for s in sections]
        gts = [charted_regions(s.reference_charting(), s.resolution) for s in sections]

        points = froc_curve(prob_maps, gts, self.thresholds, self.pipeline(sections, stack), self.mc,
                            [s.resolution for s in sections])
        knee = elbow(points)
        operating = next(p for p in points if abs(p.threshold - OPERATING_THRESHOLD) < 1e-9)
        self.flow_state['points'] = points

        payload = {
            'filtered': self.continuity is not None,
            'match_config': asdict(self.mc),
            'points': [p.to_dict() for p in points],
            'elbow': knee.to_dict(),
            'operating_point': operating.to_dict(),
        }
        write_json(self.out_dir / 'froc.json', payload)
        froc_table(points).to_csv(self.out_dir / 'froc.csv', index=False, float_format='%.6f', lineterminator='\n')
        plot_froc(points, self.out_dir / 'froc.svg', knee, operating)
        plot_froc_interactive(points, self.out_dir / 'froc.html', knee)
        logger.info(f"FROC elbow at threshold {knee.threshold:.2f}: TPR {knee.tpr:.3f}, "
                    f"{knee.fp_per_section:.2f} FP/section")
        return {'status': 'success', 'elbow': knee, 'operating_point': operating, 'points': points}


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    """Training configuration of one ablation row."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {ABLATION_VARIANTS}")
    focal = FocalParams.cross_entropy() if variant == 'ce' else base.focal
    return replace(base, focal=focal, use_contrastive='sscon' in variant, use_te=variant.endswith('+te'))


def predict_filtered(model, sections: Sequence[SectionRecord], cfg: TrainConfig,
                     ccfg: ContinuityConfig, priors: Optional[Dict] = None) -> Dict[str, List[BundleRegion]]:
    """Regions of every section at the operating threshold after the shared postprocessing."""
    predictions = {}
    for section in sections:
        _, _, regions = predict_section(model, section, cfg.tile)
        with_continuity = priors is not None and section.id in priors
        predictions[section.id] = filter_section(regions, section, priors or {}, ccfg, with_continuity)
    return predictions


def stack_priors(continuity: ContinuityFlow, sections: Sequence[SectionRecord],
                 held_out: Sequence[str] = ()) -> Dict:
    """Prepare the prior network without the charting of test or held-out sections, then compute every stack prior."""
    sections = list(sections)
    for step in (lambda: continuity.prepare_prior_model(sections, held_out), lambda: continuity.compute(sections)):
        if step()['status'] != 'success':
            raise FiberDetectError('; '.join(continuity.flow_state['errors']))
    return continuity.priors


def ablation_harness(manifest: Path, variants: Sequence[str] = ABLATION_VARIANTS,
                     base_cfg: TrainConfig = TrainConfig(), out_dir: Optional[Path] = None,
                     seed: int = 0, ccfg: ContinuityConfig = ContinuityConfig(),
                     continuity: Optional[ContinuityFlow] = None,
                     mc: MatchConfig = MatchConfig(), device: Optional[torch.device] = None) -> pd.DataFrame:
    """
    Train and evaluate each variant with the same seed and postprocessing;
    one row per variant, columns TPR dense/moderate, mean |delta fib_dens|
    dense/moderate and FP_avg.
    """
    sections = load_sections(manifest)
    train = [s for s in sections if s.split == 'train']
    test = [s for s in sections if s.split == 'test' and s.reference_charting() is not None]
    if not train or not test:
        raise EmptyDatasetError("ablation needs training sections and charted test sections")

    priors = None
    if continuity is not None:
        priors = stack_priors(continuity, sections)
    else:
        logger.warning("No continuity priors for the ablation; applying postprocessing only")

    rows = {}
    for variant in variants:
        cfg = variant_config(base_cfg, variant)
        variant_dir = Path(out_dir or '.') / 'ablation' / variant.replace('+', '_')
        logger.info(f"Ablation variant {variant}")
        model = TrainingFlow(cfg, variant_dir, seed, device).train_sections(train)
        report = evaluate(test, predict_filtered(model, test, cfg, ccfg, priors), mc)
        if out_dir is not None:
            write_report(report, variant_dir, with_plots=False)
        rows[variant] = report.table_row()

    table = pd.DataFrame.from_dict(rows, orient='index', columns=list(TABLE_COLUMNS))
    table.index.name = 'variant'
    if out_dir is not None:
        out_dir = Path(out_dir)
        table.to_csv(out_dir / 'ablation.csv', float_format='%.6f', lineterminator='\n')
        write_json(out_dir / 'ablation.json', {k: v for k, v in rows.items()})
        plot_ablation(table, out_dir / 'ablation.svg')
    return table


def fold_partition(charted: Sequence[SectionRecord], n_folds: int,
                   rng: np.random.Generator) -> List[List[SectionRecord]]:
    """Disjoint test folds over the charted sections."""
    if n_folds < 2:
        raise ValueError(f"n_folds must be >= 2, got {n_folds}")
    if len(charted) < n_folds:
        raise EmptyDatasetError(f"{len(charted)} charted sections cannot fill {n_folds} folds")
    order = rng.permutation(len(charted))
    return [[charted[i] for i in sorted(part)] for part in np.array_split(order, n_folds)]


def cross_validate(manifest: Path, n_folds: int = 5, base_cfg: TrainConfig = TrainConfig(),
                   ratio: Tuple[int, int, int] = CV_RATIO, out_dir: Optional[Path] = None,
                   seed: int = 0, ccfg: ContinuityConfig = ContinuityConfig(),
                   continuity: Optional[ContinuityFlow] = None, mc: MatchConfig = MatchConfig(),
                   device: Optional[torch.device] = None) -> Tuple[List[MetricsReport], pd.DataFrame]:
    """
    Rotate ``n_folds`` test folds over the charted sections. The remaining
    charted sections split into training and validation by
    ``ratio[0]:ratio[1]``; uncharted sections always train. Returns the fold
    reports and a mean/std aggregate.
    """
    sections = load_sections(manifest)
    charted = [s for s in sections if s.charted]
    unlabeled = [s for s in sections if not s.charted]
    rng = np.random.default_rng(seed)
    folds = fold_partition(charted, n_folds, rng)
    cfg = replace(base_cfg, val_fraction=ratio[1] / float(ratio[0] + ratio[1]))

    # fold membership, not the manifest split, decides which charting the prior sees
    unsplit = [replace(s, split='train') for s in sections]
    reports = []
    for k, test in enumerate(folds):
        held_out = {s.id for s in test}
        priors = stack_priors(continuity, unsplit, sorted(held_out)) if continuity is not None else None
        train = [s for s in charted if s.id not in held_out] + unlabeled
        if not any(s.charted for s in train):
            raise EmptyDatasetError(f"fold {k} leaves no charted training section")
        fold_dir = Path(out_dir or '.') / 'crossval' / f'fold_{k}'
        logger.info(f"Cross-validation fold {k + 1}/{n_folds}: {len(test)} test sections")
        model = TrainingFlow(cfg, fold_dir, seed + k, device).train_sections(train)
        report = evaluate(test, predict_filtered(model, test, cfg, ccfg, priors), mc)
        if out_dir is not None:
            write_report(report, fold_dir, with_plots=False)
        reports.append(report)

    frame = pd.DataFrame([r.table_row() for r in reports], columns=list(TABLE_COLUMNS), dtype=float)
    aggregate = pd.DataFrame({'mean': frame.mean(), 'std': frame.std(ddof=0)})
    aggregate.index.name = 'metric'
    if out_dir is not None:
        out_dir = Path(out_dir)
        frame.to_csv(out_dir / 'crossval_folds.csv', index_label='fold', float_format='%.6f', lineterminator='\n')
        aggregate.to_csv(out_dir / 'crossval.csv', float_format='%.6f', lineterminator='\n')
        write_json(out_dir / 'crossval.json', {
            'folds': [r.table_row() for r in reports],
            'mean': {k: (None if pd.isna(v) else float(v)) for k, v in aggregate['mean'].items()},
            'std': {k: (None if pd.isna(v) else float(v)) for k, v in aggregate['std'].items()},
        })
    return reports, aggregate
