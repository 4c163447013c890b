"""
Tests for the evaluation report, FROC flow, ablation variants, folds and charts.
"""

import json

import numpy as np
import pandas as pd
import pytest

from core.dataset_io import save_section, write_manifest, write_probability_map, write_regions
from core.domain import LABEL_DENSE, LABEL_MODERATE, BundleRegion, ProbabilityMap
from core.errors import EmptyDatasetError, FiberDetectError
from flows.evaluation_flow import (
    ABLATION_VARIANTS,
    BOXPLOT_NAME,
    METRICS_NAME,
    PER_SECTION_NAME,
    EvaluationFlow,
    FrocFlow,
    evaluate,
    evaluate_section,
    export_fiber_maps,
    fold_partition,
    froc_table,
    variant_config,
    write_report,
)
from flows.inference_flow import prob_path, regions_path
from flows.training_flow import TrainConfig
from tools.chart_generator import plot_ablation, plot_froc
from tools.losses import FocalParams
from tools.metrics import FrocPoint, MatchConfig


def box(section, r0, c0, r1, c1):
    pixels = np.array([(r, c) for r in range(r0, r1) for c in range(c0, c1)])
    return BundleRegion.from_pixels(pixels, section.resolution)


@pytest.fixture
def charted(section_factory, rng):
    """Two 48x48 test sections, each with one dense and one moderate bundle."""
    sections = []
    for i in range(2):
        charting = np.zeros((48, 48), np.uint8)
        charting[5:15, 5:15] = LABEL_DENSE
        charting[30:40, 30:40] = LABEL_MODERATE
        sections.append(section_factory((48, 48), charting=charting, section_id=f's{i}', index=i, rng=rng,
                                        split='test'))
    return sections


@pytest.fixture
def manifest(charted, tmp_path):
    entries = [save_section(s, tmp_path / 'data') for s in charted]
    return write_manifest(entries, tmp_path / 'data' / 'manifest.json')


class TestEvaluate:
    """Per-section and aggregate metrics."""

    def test_section_with_hits_and_false_positive(self, charted):
        section = charted[0]
        predicted = [box(section, 8, 8, 20, 20), box(section, 22, 2, 26, 6)]
        result = evaluate_section(section, predicted)
        row = result.row()
        assert row['tpr_dense'] == 1.0 and row['tpr_moderate'] == 0.0
        assert row['n_fp'] == 1
        assert len(result.deltas['dense']) == 1 and not result.deltas['moderate']

    def test_aggregate(self, charted):
        predictions = {'s0': [box(charted[0], 5, 5, 15, 15), box(charted[0], 30, 30, 40, 40)],
                       's1': [box(charted[1], 0, 40, 4, 44)]}
        report = evaluate(charted, predictions)
        np.testing.assert_allclose(report.tpr_dense, 0.5)
        np.testing.assert_allclose(report.tpr_moderate, 0.5)
        np.testing.assert_allclose(report.tpr_all, 0.5)
        np.testing.assert_allclose(report.fp_avg, 0.5)
        # identical regions have identical fiber density
        np.testing.assert_allclose(report.mean_delta['dense'], 0.0, atol=1e-12)
        assert report.table_row()['abs_delta_moderate'] == pytest.approx(0.0)
        assert report.match_config == {'match_rule': 'any_overlap', 'iou_min': 0.1}

    def test_missing_predictions_count_as_none(self, charted):
        report = evaluate(charted, {})
        assert report.tpr_dense == 0.0 and report.fp_avg == 0.0
        assert report.mean_delta['dense'] is None

    def test_empty(self):
        with pytest.raises(EmptyDatasetError):
            evaluate([], {})

    def test_write_report(self, charted, tmp_path):
        report = evaluate(charted, {'s0': [box(charted[0], 5, 5, 15, 15)]})
        paths = write_report(report, tmp_path)
        with open(paths['metrics'], 'r', encoding='utf-8') as f:
            payload = json.load(f)
        assert payload['n_sections'] == 2
        frame = pd.read_csv(tmp_path / PER_SECTION_NAME)
        assert list(frame['section_id']) == ['s0', 's1']
        assert (tmp_path / BOXPLOT_NAME).read_text().startswith('<?xml')

    def test_report_is_byte_stable(self, charted, tmp_path):
        report = evaluate(charted, {'s0': [box(charted[0], 5, 5, 15, 15)]})
        write_report(report, tmp_path / 'a')
        write_report(report, tmp_path / 'b')
        for name in (METRICS_NAME, PER_SECTION_NAME, BOXPLOT_NAME):
            assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes()

    def test_fiber_maps(self, charted, tmp_path):
        regions = [box(charted[0], 5, 5, 15, 15), box(charted[0], 0, 0, 1, 5)]
        written = export_fiber_maps(charted[0], regions, tmp_path)
        assert [p.name for p in written] == ['s0_000.png']


class TestEvaluationFlow:
    """Evaluating a prediction directory."""

    def test_run(self, charted, manifest, tmp_path):
        pred_dir = tmp_path / 'pred'
        prob_dir = tmp_path / 'prob'
        for section in charted:
            write_regions([box(section, 5, 5, 15, 15)], regions_path(pred_dir, section.id), section.id)
            values = np.zeros(section.shape, np.float32)
            values[5:15, 5:15] = 0.8
            write_probability_map(ProbabilityMap(values, section.id), prob_path(prob_dir, section.id))
        report = EvaluationFlow(tmp_path / 'eval', prob_dir=prob_dir, export_maps=True).run(pred_dir, manifest)
        assert report.tpr_dense == 1.0 and report.tpr_moderate == 0.0
        assert len(report.froc) == 19
        assert (tmp_path / 'eval' / METRICS_NAME).is_file()
        assert (tmp_path / 'eval' / 'fiber_maps' / 's1_000.png').is_file()

    def test_missing_predictions(self, manifest, tmp_path):
        with pytest.raises(FiberDetectError):
            EvaluationFlow(tmp_path / 'eval').run(tmp_path / 'absent', manifest)

    def test_empty_split(self, manifest, tmp_path):
        with pytest.raises(EmptyDatasetError):
            EvaluationFlow(tmp_path / 'eval').run(tmp_path / 'pred', manifest, split='train')


class TestFrocFlow:
    """Threshold sweep over stored probability maps."""

    def test_run(self, charted, manifest, tmp_path):
        prob_dir = tmp_path / 'prob'
        for section in charted:
            values = np.full(section.shape, 0.1, np.float32)
            values[5:15, 5:15] = 0.7
            values[30:40, 30:40] = 0.3
            values[20:24, 40:44] = 0.5
            write_probability_map(ProbabilityMap(values, section.id), prob_path(prob_dir, section.id))

        result = FrocFlow(tmp_path / 'froc', thresholds=(0.2, 0.6)).run(prob_dir, manifest)
        assert [p.threshold for p in result['points']] == [0.2, 0.4, 0.6]
        operating = result['operating_point']
        assert operating.tpr_dense == 1.0 and operating.tpr_moderate == 0.0
        np.testing.assert_allclose(operating.fp_per_section, 1.0)
        assert result['elbow'] in result['points']
        for name in ('froc.json', 'froc.csv', 'froc.svg', 'froc.html'):
            assert (tmp_path / 'froc' / name).is_file()
        assert len(pd.read_csv(tmp_path / 'froc' / 'froc.csv')) == 3

    def test_froc_table_columns(self):
        table = froc_table([FrocPoint(0.4, 1.0, None, 0.5, 1.0)])
        assert list(table.columns) == ['threshold', 'tpr_dense', 'tpr_moderate', 'fp_per_section', 'tpr_all']


class TestVariantsAndFolds:
    """Ablation rows and cross-validation partitions."""

    def test_variant_config(self):
        base = TrainConfig()
        ce = variant_config(base, 'ce')
        assert ce.focal == FocalParams.cross_entropy() and not ce.use_contrastive and not ce.use_te
        focal = variant_config(base, 'focal')
        assert focal.focal == base.focal and not focal.use_contrastive
        assert variant_config(base, 'focal+sscon').use_contrastive
        full = variant_config(base, 'focal+sscon+te')
        assert full.use_contrastive and full.use_te
        assert len(ABLATION_VARIANTS) == 4
        with pytest.raises(ValueError):
            variant_config(base, 'dice')

    def test_fold_partition(self, section_factory, rng):
        sections = [section_factory((8, 8), section_id=f's{i}', index=i) for i in range(11)]
        folds = fold_partition(sections, 5, rng)
        ids = [s.id for fold in folds for s in fold]
        assert sorted(ids) == sorted(s.id for s in sections)
        assert len(set(ids)) == 11
        assert sorted(len(f) for f in folds) == [2, 2, 2, 2, 3]

    def test_fold_partition_errors(self, section_factory, rng):
        sections = [section_factory((8, 8), section_id=f's{i}', index=i) for i in range(3)]
        with pytest.raises(ValueError):
            fold_partition(sections, 1, rng)
        with pytest.raises(EmptyDatasetError):
            fold_partition(sections, 4, rng)


class TestCharts:
    """SVG output."""

    def test_froc_svg_is_byte_stable(self, tmp_path):
        points = [FrocPoint(t, 1.0 - t, 0.5 - t / 2, 2.0 - 2 * t, 0.8 - t) for t in (0.2, 0.4, 0.6)]
        plot_froc(points, tmp_path / 'a.svg', points[1], points[1])
        plot_froc(points, tmp_path / 'b.svg', points[1], points[1])
        assert (tmp_path / 'a.svg').read_bytes() == (tmp_path / 'b.svg').read_bytes()

    def test_ablation_chart_with_missing_values(self, tmp_path):
        table = pd.DataFrame({'tpr_dense': [0.8, None], 'tpr_moderate': [0.5, 0.6], 'fp_avg': [1.0, 2.0]},
                             index=['ce', 'focal'])
        assert plot_ablation(table, tmp_path / 'ablation.svg').is_file()
