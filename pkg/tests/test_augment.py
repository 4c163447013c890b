"""
Tests for geometric augmentation, positive pairs and patch sampling.
"""

import numpy as np
import pytest

from core.domain import LABEL_DENSE
from core.errors import EmptyDatasetError, SamplingError, ShapeMismatchError
from tools.augmentations import (
    AugmentCounters,
    GeoAugConfig,
    GeoParams,
    PairAugConfig,
    PatchSampler,
    apply_geo,
    draw_positive_origin,
    estimate_wm_band,
    geo_augment,
    patch_class,
    patch_sampler,
    positive_pair,
)


@pytest.fixture
def striped_section(section_factory):
    """64x64 section: textured white matter in the left 40 columns, a dense bundle in the top-left corner."""
    image = np.full((64, 64, 3), 120, dtype=np.uint8)
    image[:, :40] = 210
    image[0::2, 0:40:2] = 230
    charting = np.zeros((64, 64), np.uint8)
    charting[4:14, 4:14] = LABEL_DENSE
    wm = np.zeros((64, 64), bool)
    wm[:, :40] = True
    return section_factory(image=image, charting=charting, wm_mask=wm, tissue_mask=np.ones((64, 64), bool),
                           microns_per_pixel=2.0)


class TestGeoAugment:
    """Joint image/mask transforms."""

    def test_identity(self, rng):
        patch = rng.random((16, 16, 3)).astype(np.float32)
        mask = rng.random((16, 16)) > 0.5
        out_patch, out_mask = apply_geo(patch, mask, GeoParams())
        np.testing.assert_array_equal(out_patch, patch)
        np.testing.assert_array_equal(out_mask, mask)

    def test_flips(self, rng):
        patch = rng.random((8, 8, 3)).astype(np.float32)
        mask = rng.random((8, 8)) > 0.5
        out_patch, out_mask = apply_geo(patch, mask, GeoParams(hflip=True, vflip=True))
        np.testing.assert_array_equal(out_patch, patch[::-1, ::-1])
        np.testing.assert_array_equal(out_mask, mask[::-1, ::-1])

    def test_integer_translation_moves_mask(self):
        patch = np.zeros((20, 20, 3), np.float32)
        mask = np.zeros((20, 20), bool)
        mask[5:8, 5:8] = True
        _, out_mask = apply_geo(patch, mask, GeoParams(dy=3, dx=-2))
        expected = np.zeros_like(mask)
        expected[8:11, 3:6] = True
        np.testing.assert_array_equal(out_mask, expected)

    def test_mask_stays_binary_and_aligned(self, rng):
        patch = np.zeros((64, 64, 3), np.float32)
        mask = np.zeros((64, 64), bool)
        mask[20:44, 20:44] = True
        patch[mask] = 1.0
        cfg = GeoAugConfig(translate_px=(-5, 5), rotate_deg=(-20, 20), scale=(0.9, 1.1))
        for _ in range(10):
            out_patch, out_mask = geo_augment(patch, mask, cfg, rng)
            assert out_mask.dtype == bool
            assert out_patch.shape == patch.shape
            # the square stays inside the frame, so its area only changes through scaling
            assert 0.7 * mask.sum() <= out_mask.sum() <= 1.35 * mask.sum()
            assert out_patch[..., 0][out_mask].mean() > 0.75

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            apply_geo(np.zeros((4, 4, 3)), np.zeros((5, 4)), GeoParams(hflip=True))

    def test_reversed_range_rejected(self):
        with pytest.raises(ValueError):
            GeoAugConfig(rotate_deg=(10, -10))


class TestPositivePair:
    """Contrastive views."""

    def test_white_matter_band(self, striped_section):
        low, high = estimate_wm_band(striped_section)
        assert low <= 210 / 255 <= high
        assert not low <= 120 / 255 <= high

    def test_displaced_crop_stays_in_band_and_radius(self, striped_section, rng):
        cfg = PairAugConfig(max_crop_offset_um=10.0, noise_std=0.0)
        band = estimate_wm_band(striped_section)
        counters = AugmentCounters()
        for _ in range(20):
            (r, c), ok = draw_positive_origin(striped_section, (20, 4), 16, cfg, rng, band, counters)
            assert ok
            assert (r - 20) ** 2 + (c - 4) ** 2 <= 5 ** 2
            assert band[0] <= striped_section.grayscale()[r:r + 16, c:c + 16].mean() <= band[1]
        assert counters.pairs == 20 and counters.fallbacks == 0

    def test_fallback_to_anchor(self, striped_section, rng):
        cfg = PairAugConfig(max_crop_offset_um=4.0, wm_mean_band=(0.99, 1.0), max_resample_attempts=5)
        counters = AugmentCounters()
        origin, ok = draw_positive_origin(striped_section, (10, 40), 16, cfg, rng, counters=counters)
        assert not ok and origin == (10, 40)
        assert counters.fallbacks == 1 and counters.attempts == 5

    def test_views(self, striped_section, rng):
        view_a, view_b = positive_pair(striped_section, (20, 4), PairAugConfig(max_crop_offset_um=10.0), rng,
                                       patch_size=16)
        assert view_a.shape == view_b.shape == (16, 16, 3)
        assert view_a.dtype == np.float32
        assert 0.0 <= view_a.min() and view_a.max() <= 1.0

    def test_offset_below_one_pixel(self):
        with pytest.raises(ValueError):
            PairAugConfig(max_crop_offset_um=1.0).offset_radius_px(2.0)

    def test_anchor_outside_section(self, striped_section, rng):
        with pytest.raises(ShapeMismatchError):
            draw_positive_origin(striped_section, (60, 60), 16, PairAugConfig(), rng)


class TestPatchSampler:
    """Fiber/background mixing."""

    def test_patch_class(self):
        mask = np.zeros((10, 10), bool)
        assert patch_class(mask) == 0
        mask[0, 0] = True
        assert patch_class(mask) == 1
        assert patch_class(mask, min_fraction=0.05) == 0

    def test_fiber_fraction(self, striped_section, rng):
        sampler = PatchSampler([striped_section], patch_size=16)
        classes = [s.patch_class for s in sampler.sample(10_000, 0.5, rng)]
        np.testing.assert_allclose(np.mean(classes), 0.5, atol=0.02)

    def test_samples_are_aligned(self, striped_section, rng):
        for sample in patch_sampler([striped_section], 8, 0.5, rng, patch_size=16):
            r, c = sample.origin
            np.testing.assert_array_equal(sample.mask, striped_section.fiber_mask()[r:r + 16, c:c + 16])
            np.testing.assert_allclose(sample.patch, striped_section.image[r:r + 16, c:c + 16] / 255.0,
                                       rtol=1e-6)

    def test_all_fiber_or_background(self, striped_section, rng):
        sampler = PatchSampler([striped_section], patch_size=16)
        assert all(s.patch_class == 1 for s in sampler.sample(20, 1.0, rng))
        assert all(s.patch_class == 0 for s in sampler.sample(20, 0.0, rng))

    def test_labels_follow_sampler_fraction(self, striped_section, rng):
        sampler = PatchSampler([striped_section], patch_size=16, min_fiber_fraction=0.25)
        fiber = sampler.sample(50, 1.0, rng)
        assert all(s.patch_class == 1 and s.mask.sum() >= 64 for s in fiber)
        background = sampler.sample(500, 0.0, rng)
        assert all(s.patch_class == 0 and s.mask.sum() < 64 for s in background)
        # partially covered patches are background at this fraction
        assert any(s.mask.any() for s in background)
        assert all(s.patch_class == sampler.is_fiber_patch(s.section_id, s.origin) for s in fiber + background)

    def test_explicit_targets(self, striped_section, rng):
        empty = {striped_section.id: np.zeros(striped_section.shape, bool)}
        sampler = PatchSampler([striped_section.without_charting()], patch_size=16, targets=empty)
        assert not sampler.has_fiber_patches
        assert sampler.feasible_fraction(0.5) == 0.0
        with pytest.raises(SamplingError):
            sampler.sample(4, 0.5, rng)

    def test_no_charted_sections(self, striped_section):
        with pytest.raises(EmptyDatasetError):
            PatchSampler([striped_section.without_charting()], patch_size=16)

    def test_patch_larger_than_section(self, striped_section):
        with pytest.raises(ShapeMismatchError):
            PatchSampler([striped_section], patch_size=128)
