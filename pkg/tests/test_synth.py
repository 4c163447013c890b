"""
Tests for the synthetic stack generator.
"""

import numpy as np
import pytest

from core.dataset_io import load_sections
from core.domain import LABEL_DENSE, LABEL_MODERATE, SectionRecord
from core.geometry import charted_regions
from tools.augmentations import PairAugConfig
from tools.synth_generator import (
    SYNTH_PAIR_OFFSET_UM,
    SynthConfig,
    apply_splits,
    assign_splits,
    generate_section,
    write_dataset,
)

from conftest import TINY_SYNTH


class TestSynthConfig:
    """Configuration validation."""

    def test_defaults(self):
        cfg = SynthConfig()
        assert cfg.n_sections == 55
        assert cfg.image_size == (1024, 1024)
        np.testing.assert_allclose(cfg.resolution.microns_per_pixel, 16.0)

    def test_pair_offset_keeps_scanned_pixel_span(self):
        pair = PairAugConfig(max_crop_offset_um=SYNTH_PAIR_OFFSET_UM)
        synthetic = pair.offset_radius_px(SynthConfig().microns_per_pixel)
        scanned = PairAugConfig().offset_radius_px(1.6)
        np.testing.assert_allclose(synthetic, scanned)
        np.testing.assert_allclose(synthetic, 12.5)

    def test_dense_must_exceed_moderate(self):
        with pytest.raises(ValueError):
            SynthConfig(fiber_density_dense=(0.05, 0.06), fiber_density_moderate=(0.04, 0.07))

    def test_too_many_labeled(self):
        with pytest.raises(ValueError):
            SynthConfig(n_sections=4, n_labeled=3, n_heldout=2)


class TestGenerateSection:
    """Rendering of individual sections."""

    def test_section_fields(self, synthetic_stack):
        section = synthetic_stack[0]
        assert isinstance(section, SectionRecord)
        assert section.image.shape == (512, 512, 3)
        assert section.image.dtype == np.uint8
        assert section.charted
        assert set(np.unique(section.charting)) <= {0, LABEL_MODERATE, LABEL_DENSE}
        assert section.ventricle_mask.any() and section.wm_mask.any()

    def test_every_section_has_both_severities(self, synthetic_stack):
        for section in synthetic_stack:
            dense, moderate = charted_regions(section.charting, section.resolution)
            assert dense and moderate

    def test_bundles_lie_in_tissue(self, synthetic_stack):
        for section in synthetic_stack:
            fibers = section.fiber_mask()
            assert not (fibers & ~section.tissue_mask).any()

    def test_fibers_darken_bundles(self, synthetic_stack):
        section = synthetic_stack[1]
        gray = section.grayscale()
        inside = gray[section.charting == LABEL_DENSE].mean()
        wm_only = section.wm_mask & (section.charting == 0)
        assert inside < gray[wm_only].mean()

    def test_deterministic(self, synthetic_stack):
        again = generate_section(TINY_SYNTH, 2)
        np.testing.assert_array_equal(again.image, synthetic_stack[2].image)
        np.testing.assert_array_equal(again.charting, synthetic_stack[2].charting)

    def test_bundles_persist_between_neighbours(self, synthetic_stack):
        for a, b in zip(synthetic_stack, synthetic_stack[1:]):
            dense_a = a.charting == LABEL_DENSE
            dense_b = b.charting == LABEL_DENSE
            assert (dense_a & dense_b).sum() > 0.5 * min(dense_a.sum(), dense_b.sum())

    def test_index_out_of_range(self):
        with pytest.raises(ValueError):
            generate_section(TINY_SYNTH, TINY_SYNTH.n_sections)


class TestSplits:
    """Labeled, unlabeled and held-out sections."""

    def test_assign_splits_disjoint(self):
        labeled, heldout = assign_splits(55, 5, 10)
        assert len(labeled) == 5 and len(heldout) == 10
        assert not set(labeled) & set(heldout)

    def test_apply_splits(self, synthetic_stack):
        sections = apply_splits(synthetic_stack, TINY_SYNTH)
        assert sum(s.split == 'test' for s in sections) == 1
        train = [s for s in sections if s.split == 'train']
        assert sum(s.charted for s in train) == 2
        for s in train:
            if not s.charted:
                assert s.charting is None and s.oracle_charting is not None

    def test_write_and_reload(self, synthetic_stack, tmp_path):
        sections = apply_splits(synthetic_stack, TINY_SYNTH)
        manifest = write_dataset(sections, tmp_path)
        loaded = load_sections(manifest)
        assert [s.id for s in loaded] == [s.id for s in sections]
        for original, restored in zip(sections, loaded):
            np.testing.assert_array_equal(original.image, restored.image)
            np.testing.assert_array_equal(original.reference_charting(), restored.reference_charting())
            assert original.charted == restored.charted
            assert original.split == restored.split
