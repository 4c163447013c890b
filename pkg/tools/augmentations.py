# tools/augmentations.py
"""
Patch sampling and augmentation.

- ``geo_augment``: random translation, rotation, flips and scaling applied
  identically to an image patch and its mask (the mask is resampled with
  nearest-neighbour interpolation so it stays binary).
- ``positive_pair``: two views of the same white-matter location for the
  contrastive arm; the second view is a crop displaced by at most
  ``max_crop_offset_um`` whose mean intensity lies in the white-matter band.
- ``PatchSampler``: draws fiber/background patches with a controlled mix.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import cv2
import numpy as np

from core.domain import SectionRecord
from core.errors import EmptyDatasetError, SamplingError, ShapeMismatchError
from core.geometry import tissue_mask_of

logger = logging.getLogger(__name__)

PATCH_FIBER_FRACTION = 0.005
MAX_SAMPLING_ATTEMPTS = 200


@dataclass(frozen=True)
class GeoAugConfig:
    translate_px: Tuple[int, int] = (-50, 50)
    rotate_deg: Tuple[float, float] = (-20.0, 20.0)
    hflip: bool = True
    vflip: bool = True
    scale: Tuple[float, float] = (0.9, 1.2)
    rng_seed: Optional[int] = None

    def __post_init__(self):
        for name in ('translate_px', 'rotate_deg', 'scale'):
            low, high = getattr(self, name)
            if low > high:
                raise ValueError(f"{name} range is reversed: {(low, high)}")
        if self.scale[0] <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class GeoParams:
    dy: int = 0
    dx: int = 0
    angle_deg: float = 0.0
    scale: float = 1.0
    hflip: bool = False
    vflip: bool = False

    @property
    def is_identity(self) -> bool:
        return (self.dy == 0 and self.dx == 0 and self.angle_deg == 0.0 and self.scale == 1.0
                and not self.hflip and not self.vflip)


@dataclass(frozen=True)
class PairAugConfig:
    max_crop_offset_um: float = 20.0
    blur_sigma: Tuple[float, float] = (0.05, 0.3)
    noise_std: float = 0.02
    # fixed (low, high) grayscale band; None estimates it per section
    wm_mean_band: Optional[Tuple[float, float]] = None
    wm_band_std: float = 1.0
    max_resample_attempts: int = 50

    def __post_init__(self):
        if self.max_crop_offset_um < 0:
            raise ValueError("max_crop_offset_um must be >= 0")
        if not 0 <= self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ValueError(f"invalid blur_sigma range {self.blur_sigma}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.max_resample_attempts < 1:
            raise ValueError("max_resample_attempts must be >= 1")

    def offset_radius_px(self, microns_per_pixel: float) -> float:
        radius = self.max_crop_offset_um / microns_per_pixel
        if radius < 1.0:
            raise ValueError(
                f"max_crop_offset_um={self.max_crop_offset_um} is below one pixel at {microns_per_pixel} um/px"
            )
        return radius


@dataclass
class AugmentCounters:
    pairs: int = 0
    fallbacks: int = 0
    attempts: int = 0

    def merge(self, other: 'AugmentCounters') -> None:
        self.pairs += other.pairs
        self.fallbacks += other.fallbacks
        self.attempts += other.attempts

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


def draw_geo_params(cfg: GeoAugConfig, rng: np.random.Generator) -> GeoParams:
    return GeoParams(
        dy=int(rng.integers(cfg.translate_px[0], cfg.translate_px[1] + 1)),
        dx=int(rng.integers(cfg.translate_px[0], cfg.translate_px[1] + 1)),
        angle_deg=float(rng.uniform(*cfg.rotate_deg)),
        scale=float(rng.uniform(*cfg.scale)),
        hflip=bool(cfg.hflip and rng.random() < 0.5),
        vflip=bool(cfg.vflip and rng.random() < 0.5),
    )


def _warp(raster: np.ndarray, matrix: np.ndarray, nearest: bool) -> np.ndarray:
    h, w = raster.shape[:2]
    if nearest:
        return cv2.warpAffine(raster, matrix, (w, h), flags=cv2.INTER_NEAREST,
                              borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return cv2.warpAffine(raster, matrix, (w, h), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_REFLECT_101)


def apply_geo(patch: np.ndarray, mask: np.ndarray, params: GeoParams) -> Tuple[np.ndarray, np.ndarray]:
    """Apply one drawn transform to an aligned (patch, mask) pair."""
    if patch.shape[:2] != mask.shape[:2]:
        raise ShapeMismatchError(f"patch {patch.shape[:2]} and mask {mask.shape[:2]} are not aligned")
    if params.is_identity:
        return patch.copy(), mask.copy()

    out_dtype = patch.dtype
    work = patch.astype(np.float32) if patch.dtype not in (np.uint8, np.float32) else patch
    mask_u8 = (np.asarray(mask) > 0).astype(np.uint8)

    if params.angle_deg != 0.0 or params.scale != 1.0 or params.dy or params.dx:
        h, w = mask_u8.shape
        matrix = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), params.angle_deg, params.scale)
        matrix[0, 2] += params.dx
        matrix[1, 2] += params.dy
        work = _warp(work, matrix, nearest=False)
        mask_u8 = _warp(mask_u8, matrix, nearest=True)
        if work.ndim == 2 and patch.ndim == 3:
            work = work[..., None]

    if params.hflip:
        work, mask_u8 = work[:, ::-1], mask_u8[:, ::-1]
    if params.vflip:
        work, mask_u8 = work[::-1], mask_u8[::-1]
    return np.ascontiguousarray(work).astype(out_dtype, copy=False), np.ascontiguousarray(mask_u8) > 0


def geo_augment(patch: np.ndarray, mask: np.ndarray, cfg: GeoAugConfig,
                rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draw transform parameters uniformly from ``cfg`` and apply them to both rasters."""
    return apply_geo(patch, mask, draw_geo_params(cfg, rng))


def estimate_wm_band(section: SectionRecord, n_std: float = 1.0) -> Tuple[float, float]:
    """
    White-matter grayscale band: mode of the tissue intensity histogram
    plus/minus ``n_std`` standard deviations of the white-matter intensities.
    """
    gray = section.grayscale()
    tissue = tissue_mask_of(section)
    if section.ventricle_mask is not None:
        tissue = tissue & ~section.ventricle_mask
    values = gray[tissue] if tissue.any() else gray.ravel()

    hist, edges = np.histogram(values, bins=128, range=(0.0, 1.0))
    peak = int(np.argmax(hist))
    mode = 0.5 * (edges[peak] + edges[peak + 1])

    if section.wm_mask is not None and section.wm_mask.any():
        wm_values = gray[section.wm_mask]
    else:
        wm_values = values[values >= np.median(values)]
    spread = float(np.std(wm_values, ddof=1)) if wm_values.size > 1 else 0.0
    return float(mode - n_std * spread), float(mode + n_std * spread)


def crop(section: SectionRecord, origin: Tuple[int, int], size: int) -> np.ndarray:
    r, c = origin
    return section.image[r:r + size, c:c + size].astype(np.float32) / 255.0


def _offset_candidates(radius_px: float) -> np.ndarray:
    r = int(np.floor(radius_px))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    inside = yy ** 2 + xx ** 2 <= radius_px ** 2 + 1e-9
    return np.stack([yy[inside], xx[inside]], axis=1)


def draw_positive_origin(section: SectionRecord, anchor_origin: Tuple[int, int], patch_size: int,
                         cfg: PairAugConfig, rng: np.random.Generator,
                         band: Optional[Tuple[float, float]] = None,
                         counters: Optional[AugmentCounters] = None) -> Tuple[Tuple[int, int], bool]:
    """Origin of the displaced crop and whether it met the white-matter criterion."""
    counters = counters if counters is not None else AugmentCounters()
    h, w = section.shape
    r0, c0 = int(anchor_origin[0]), int(anchor_origin[1])
    if not (0 <= r0 <= h - patch_size and 0 <= c0 <= w - patch_size):
        raise ShapeMismatchError(f"anchor patch at {anchor_origin} does not fit in section {section.id}")

    low, high = band if band is not None else (cfg.wm_mean_band or estimate_wm_band(section, cfg.wm_band_std))
    candidates = _offset_candidates(cfg.offset_radius_px(section.resolution.microns_per_pixel))
    gray = section.grayscale()
    counters.pairs += 1
    for _ in range(cfg.max_resample_attempts):
        counters.attempts += 1
        dy, dx = candidates[rng.integers(len(candidates))]
        r, c = r0 + int(dy), c0 + int(dx)
        if not (0 <= r <= h - patch_size and 0 <= c <= w - patch_size):
            continue
        mean = float(gray[r:r + patch_size, c:c + patch_size].mean())
        if low <= mean <= high:
            return (r, c), True

    counters.fallbacks += 1
    logger.debug(f"No white-matter crop near {anchor_origin} in {section.id}; using the anchor itself")
    return (r0, c0), False


def noise_and_blur(patch: np.ndarray, cfg: PairAugConfig, rng: np.random.Generator,
                   sigma: Optional[float] = None) -> np.ndarray:
    sigma = float(rng.uniform(*cfg.blur_sigma)) if sigma is None else sigma
    out = patch.astype(np.float32)
    if sigma > 0:
        out = cv2.GaussianBlur(out, (0, 0), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT_101)
        if out.ndim == 2 and patch.ndim == 3:
            out = out[..., None]
    if cfg.noise_std > 0:
        out = out + rng.normal(0.0, cfg.noise_std, size=out.shape).astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def positive_pair(section: SectionRecord, anchor_patch_origin: Tuple[int, int], cfg: PairAugConfig,
                  rng: np.random.Generator, patch_size: int = 256,
                  band: Optional[Tuple[float, float]] = None,
                  counters: Optional[AugmentCounters] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    view_a: the anchor patch with Gaussian blur and additive noise.
    view_b: a nearby white-matter crop (the anchor itself when none qualifies).
    """
    origin_b, _ = draw_positive_origin(section, anchor_patch_origin, patch_size, cfg, rng, band, counters)
    view_a = noise_and_blur(crop(section, anchor_patch_origin, patch_size), cfg, rng)
    view_b = crop(section, origin_b, patch_size)
    return view_a, view_b


@dataclass
class PatchSample:
    section_id: str
    origin: Tuple[int, int]
    patch: np.ndarray
    mask: np.ndarray
    patch_class: int


def patch_class(mask: np.ndarray, min_fraction: float = PATCH_FIBER_FRACTION) -> int:
    """1 (fiber) iff at least ``min_fraction`` of the patch is foreground."""
    mask = np.asarray(mask, dtype=bool)
    return int(mask.sum() >= min_fraction * mask.size)


class PatchSampler:
    """
    Random fiber/background patches from sections with a binary target.

    ``targets`` maps section id to the training target (manual charting or
    pseudo-label); by default charted sections use their charting.
    """

    def __init__(self, sections: Sequence[SectionRecord], patch_size: int = 256,
                 targets: Optional[Mapping[str, np.ndarray]] = None,
                 min_fiber_fraction: float = PATCH_FIBER_FRACTION):
        self.patch_size = int(patch_size)
        self.min_fiber_fraction = float(min_fiber_fraction)
        self.min_fiber_pixels = self.min_fiber_fraction * self.patch_size ** 2
        self.sections: List[SectionRecord] = []
        self.targets: Dict[str, np.ndarray] = {}
        self._by_id: Dict[str, SectionRecord] = {}
        self._counts: Dict[str, np.ndarray] = {}
        self._fiber_pixels: Dict[str, np.ndarray] = {}

        for section in sections:
            if targets is not None and section.id in targets:
                target = np.asarray(targets[section.id], dtype=bool)
            elif targets is None and section.charted:
                target = section.fiber_mask()
            else:
                continue
            if target.shape != section.shape:
                raise ShapeMismatchError(f"target for {section.id} has shape {target.shape}, expected {section.shape}")
            if min(section.shape) < self.patch_size:
                raise ShapeMismatchError(
                    f"section {section.id} {section.shape} is smaller than the patch size {self.patch_size}"
                )
            self.sections.append(section)
            self._by_id[section.id] = section
            self.targets[section.id] = target
            self._counts[section.id] = self._patch_counts(target)
            self._fiber_pixels[section.id] = np.argwhere(target)

        if not self.sections:
            raise EmptyDatasetError("patch sampler received no sections with a training target")
        self._fiber_sections = [s for s in self.sections
                                if (self._counts[s.id] >= self.min_fiber_pixels).any()]
        self._background_sections = [s for s in self.sections
                                     if (self._counts[s.id] < self.min_fiber_pixels).any()]

    def _patch_counts(self, target: np.ndarray) -> np.ndarray:
        """Foreground pixel count of every patch, indexed by its origin."""
        k = self.patch_size
        integral = np.pad(target.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
        return integral[k:, k:] - integral[:-k, k:] - integral[k:, :-k] + integral[:-k, :-k]

    def is_fiber_patch(self, section_id: str, origin: Tuple[int, int]) -> bool:
        return bool(self._counts[section_id][origin] >= self.min_fiber_pixels)

    @property
    def has_fiber_patches(self) -> bool:
        return bool(self._fiber_sections)

    @property
    def has_background_patches(self) -> bool:
        return bool(self._background_sections)

    def _draw_fiber(self, rng: np.random.Generator) -> Tuple[SectionRecord, Tuple[int, int]]:
        k = self.patch_size
        for _ in range(MAX_SAMPLING_ATTEMPTS):
            section = self._fiber_sections[rng.integers(len(self._fiber_sections))]
            pixels = self._fiber_pixels[section.id]
            r, c = pixels[rng.integers(len(pixels))]
            h, w = section.shape
            origin = (int(np.clip(r - rng.integers(k), 0, h - k)), int(np.clip(c - rng.integers(k), 0, w - k)))
            if self.is_fiber_patch(section.id, origin):
                return section, origin
        raise SamplingError(f"no fiber patch found after {MAX_SAMPLING_ATTEMPTS} attempts")

    def _draw_background(self, rng: np.random.Generator) -> Tuple[SectionRecord, Tuple[int, int]]:
        k = self.patch_size
        for _ in range(MAX_SAMPLING_ATTEMPTS):
            section = self._background_sections[rng.integers(len(self._background_sections))]
            h, w = section.shape
            origin = (int(rng.integers(h - k + 1)), int(rng.integers(w - k + 1)))
            if not self.is_fiber_patch(section.id, origin):
                return section, origin
        raise SamplingError(f"no background patch found after {MAX_SAMPLING_ATTEMPTS} attempts")

    def draw_origin(self, rng: np.random.Generator, fiber: bool) -> Tuple[SectionRecord, Tuple[int, int]]:
        if fiber and not self._fiber_sections:
            raise SamplingError("fiber patches requested but no section contains a fiber patch")
        if not fiber and not self._background_sections:
            raise SamplingError("background patches requested but every patch contains fibers")
        return self._draw_fiber(rng) if fiber else self._draw_background(rng)

    def feasible_fraction(self, fiber_fraction: float) -> float:
        """``fiber_fraction`` clamped to what the targets can provide."""
        if not self.has_fiber_patches:
            return 0.0
        if not self.has_background_patches:
            return 1.0
        return fiber_fraction

    def sample(self, batch_size: int, fiber_fraction: float, rng: np.random.Generator) -> List[PatchSample]:
        if not 0.0 <= fiber_fraction <= 1.0:
            raise ValueError(f"fiber_fraction must be in [0, 1], got {fiber_fraction}")
        if fiber_fraction > 0 and not self.has_fiber_patches:
            raise SamplingError("fiber patches requested but no section contains a fiber patch")
        k = self.patch_size
        batch = []
        for _ in range(batch_size):
            section, (r, c) = self.draw_origin(rng, fiber=bool(rng.random() < fiber_fraction))
            mask = self.targets[section.id][r:r + k, c:c + k]
            batch.append(PatchSample(
                section_id=section.id,
                origin=(r, c),
                patch=crop(section, (r, c), k),
                mask=mask.copy(),
                patch_class=patch_class(mask, self.min_fiber_fraction),
            ))
        return batch

    def section(self, section_id: str) -> SectionRecord:
        return self._by_id[section_id]


def patch_sampler(dataset: Sequence[SectionRecord], batch_size: int, fiber_fraction: float,
                  rng: np.random.Generator, patch_size: int = 256) -> List[PatchSample]:
    """One batch of (patch, mask, patch_class) samples from the charted sections of ``dataset``."""
    return PatchSampler(dataset, patch_size=patch_size).sample(batch_size, fiber_fraction, rng)
