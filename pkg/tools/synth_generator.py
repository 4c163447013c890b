"""
Synthetic tracer sections.

Every section shows a textured tissue slab (bright white matter, darker grey
matter, an empty ventricle), dark anti-aliased fiber streaks clustered into
dense and moderate bundles, and unlabeled confounders: stippled terminal
fields, speckle, dust and glare. Bundles persist through the stack and drift
by at most ``drift_px_per_section`` between neighbouring sections.

Generation is a pure function of (config, section index).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from skimage.draw import ellipse as draw_ellipse
from skimage.draw import line_aa

from core.dataset_io import MANIFEST_NAME, save_section, write_manifest
from core.domain import LABEL_DENSE, LABEL_MODERATE, Resolution, SectionRecord, Severity
from core.errors import DatasetIOError, GenerationError
from core.geometry import disk

logger = logging.getLogger(__name__)

MAX_PLACEMENT_ATTEMPTS = 400
MAX_FIBERS_PER_BUNDLE = 600
FIBER_CORE_ALPHA = 0.5
# Synthetic sections are ten times coarser than scanned ones (1.6 um/px);
# positive-pair crops keep the scanned-data pixel span of 20 um.
SYNTH_MICRONS_PER_PIXEL = 16.0
SYNTH_PAIR_OFFSET_UM = 200.0

BACKGROUND_RGB = np.array([238.0, 234.0, 228.0])
WM_RGB = np.array([214.0, 202.0, 186.0])
GM_RGB = np.array([182.0, 164.0, 146.0])
FIBER_RGB = np.array([58.0, 40.0, 30.0])


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_sections: int = 55
    image_size: Tuple[int, int] = (1024, 1024)
    n_dense_bundles: Tuple[int, int] = (1, 2)
    n_moderate_bundles: Tuple[int, int] = (1, 2)
    fiber_density_dense: Tuple[float, float] = (0.10, 0.14)
    fiber_density_moderate: Tuple[float, float] = (0.04, 0.07)
    artifact_rate: float = 0.5
    terminal_field_rate: float = 0.6
    drift_px_per_section: float = 3.0
    microns_per_pixel: float = SYNTH_MICRONS_PER_PIXEL
    section_gap_um: float = 400.0
    bundle_area_mm2: Tuple[float, float] = (2.5, 3.2)
    terminal_field_area_mm2: Tuple[float, float] = (0.8, 3.0)
    satellite_gap_um: Tuple[float, float] = (60.0, 150.0)
    confounder_clearance_um: float = 600.0
    boundary_margin_mm: float = 1.2
    n_labeled: int = 5
    n_heldout: int = 10
    macaque_id: str = 'synth-00'

    def __post_init__(self):
        for name in ('fiber_density_dense', 'fiber_density_moderate'):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"{name} must satisfy 0 <= low <= high <= 1, got {(lo, hi)}")
        if not self.fiber_density_dense[1] > self.fiber_density_moderate[1]:
            raise ValueError("dense density upper bound must exceed the moderate upper bound")
        for name in ('artifact_rate', 'terminal_field_rate'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ('n_dense_bundles', 'n_moderate_bundles'):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 0 <= low <= high")
        if self.n_sections < 1:
            raise ValueError("n_sections must be >= 1")
        if self.drift_px_per_section < 0:
            raise ValueError("drift_px_per_section must be >= 0")
        if self.n_labeled + self.n_heldout > self.n_sections:
            raise ValueError("n_labeled + n_heldout exceeds n_sections")

    @property
    def resolution(self) -> Resolution:
        return Resolution(self.microns_per_pixel, self.section_gap_um)


@dataclass
class BundlePlan:
    severity: Severity
    pixels: np.ndarray          # band pixels relative to the anchor
    spine: np.ndarray           # dense spine samples relative to the anchor
    normal: np.ndarray
    width: float
    length: float
    density: float
    anchor: np.ndarray          # reference-frame anchor (row, col)
    walk: np.ndarray            # per-section local offsets, shape (n_sections, 2)


@dataclass
class StackPlan:
    shape: Tuple[int, int]
    center: np.ndarray
    tissue_radii: np.ndarray
    wm_radii: np.ndarray
    ventricle_offset: np.ndarray
    ventricle_radii: np.ndarray
    global_walk: np.ndarray     # per-section anatomy offsets, shape (n_sections, 2)
    bundles: List[BundlePlan] = field(default_factory=list)


def integer_steps(radius: float) -> np.ndarray:
    """All integer (dy, dx) with Euclidean norm <= radius."""
    r = int(np.floor(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = (yy ** 2 + xx ** 2) <= radius ** 2 + 1e-9
    return np.stack([yy[keep], xx[keep]], axis=1)


def random_walk(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    steps = integer_steps(radius)
    walk = np.zeros((n, 2), dtype=np.int64)
    for i in range(1, n):
        walk[i] = walk[i - 1] + steps[rng.integers(len(steps))]
    return walk


def _ellipse_mask(shape, center, radii) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    rr, cc = draw_ellipse(center[0], center[1], radii[0], radii[1], shape=shape)
    mask[rr, cc] = True
    return mask


def _band_template(rng: np.random.Generator, area_px: float):
    """Curved diagonal band of roughly ``area_px`` pixels: (pixels, spine, normal, width, length)."""
    aspect = rng.uniform(2.5, 4.0)
    width = float(np.sqrt(area_px / (aspect + np.pi / 4)))
    length = aspect * width
    theta = np.deg2rad(rng.uniform(25.0, 65.0) + rng.choice([0.0, 90.0]))
    direction = np.array([np.cos(theta), np.sin(theta)])
    normal = np.array([-np.sin(theta), np.cos(theta)])

    t = np.linspace(-length / 2, length / 2, int(2 * length) + 2)
    bend = rng.uniform(0.04, 0.12) * length
    lateral = bend * np.sin(np.pi * t / length * rng.uniform(0.7, 1.5) + rng.uniform(0, 2 * np.pi))
    spine = t[:, None] * direction + lateral[:, None] * normal

    half = int(np.ceil(np.abs(spine).max() + width)) + 2
    grid = np.zeros((2 * half + 1, 2 * half + 1), dtype=bool)
    idx = np.round(spine).astype(int) + half
    grid[idx[:, 0], idx[:, 1]] = True
    band = ndimage.distance_transform_edt(~grid) <= width / 2
    pixels = np.argwhere(band) - half
    return pixels, spine, normal, width, length


class _Placer:
    """Reference-frame bookkeeping for rejection-sampled bundle placement."""

    def __init__(self, shape, safe_zone: np.ndarray, gap_px: float):
        self.shape = shape
        self.safe_zone = safe_zone
        self.occupied = np.zeros(shape, dtype=bool)
        self.gap = disk(gap_px)

    def swept(self, pixels: np.ndarray, anchor: np.ndarray, walk: np.ndarray) -> Optional[np.ndarray]:
        offsets = np.unique(walk, axis=0)
        coords = (pixels[None, :, :] + anchor[None, None, :] + offsets[:, None, :]).reshape(-1, 2)
        h, w = self.shape
        if coords.min() < 0 or (coords[:, 0] >= h).any() or (coords[:, 1] >= w).any():
            return None
        mask = np.zeros(self.shape, dtype=bool)
        mask[coords[:, 0], coords[:, 1]] = True
        return mask

    def fits(self, swept: np.ndarray) -> bool:
        return bool(self.safe_zone[swept].all() and not self.occupied[swept].any())

    def occupy(self, swept: np.ndarray) -> None:
        self.occupied |= ndimage.binary_dilation(swept, structure=self.gap)


def _count(rng: np.random.Generator, bounds: Tuple[int, int]) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


@lru_cache(maxsize=8)
def plan_stack(cfg: SynthConfig) -> StackPlan:
    """Anatomy and bundle trajectories shared by every section of the stack."""
    rng = np.random.default_rng([cfg.seed, 0x5EC7])
    res = cfg.resolution
    h, w = cfg.image_size
    shape = (h, w)
    center = np.array([h / 2.0, w / 2.0])
    tissue_radii = np.array([h, w]) * rng.uniform(0.42, 0.45, size=2)
    wm_radii = tissue_radii * rng.uniform(0.70, 0.76)
    ventricle_offset = np.array([0.0, -0.08 * w]) * rng.uniform(0.8, 1.2)
    ventricle_radii = np.array([0.07 * h, 0.03 * w]) * rng.uniform(0.8, 1.2)

    half_drift = cfg.drift_px_per_section / 2.0
    plan = StackPlan(shape, center, tissue_radii, wm_radii, ventricle_offset, ventricle_radii,
                     random_walk(rng, cfg.n_sections, half_drift))

    tissue = _ellipse_mask(shape, center, tissue_radii)
    wm = _ellipse_mask(shape, center, wm_radii)
    ventricle = _ellipse_mask(shape, center + ventricle_offset, ventricle_radii)
    corridor = ndimage.binary_dilation(wm, structure=disk(res.mm_to_px(1.0)))
    inner = ndimage.distance_transform_edt(tissue) >= res.mm_to_px(cfg.boundary_margin_mm)
    clear_of_ventricle = ~ndimage.binary_dilation(ventricle, structure=disk(res.mm_to_px(0.3)))
    placer = _Placer(shape, corridor & inner & clear_of_ventricle, gap_px=2.5)
    wm_candidates = np.argwhere(wm & inner & clear_of_ventricle)

    n_dense = _count(rng, cfg.n_dense_bundles)
    n_moderate = _count(rng, cfg.n_moderate_bundles)
    dense_plans: List[BundlePlan] = []

    for _ in range(n_dense):
        plan.bundles.append(_place_bundle(rng, cfg, placer, Severity.DENSE, wm_candidates, parent=None))
        dense_plans.append(plan.bundles[-1])
    for _ in range(n_moderate):
        parent = dense_plans[rng.integers(len(dense_plans))] if dense_plans else None
        plan.bundles.append(_place_bundle(rng, cfg, placer, Severity.MODERATE, wm_candidates, parent))

    logger.info(f"Planned stack {cfg.macaque_id}: {n_dense} dense + {n_moderate} moderate bundles")
    return plan


def _place_bundle(rng, cfg: SynthConfig, placer: _Placer, severity: Severity,
                  wm_candidates: np.ndarray, parent: Optional[BundlePlan]) -> BundlePlan:
    res = cfg.resolution
    area_px = res.mm2_to_pixels(rng.uniform(*cfg.bundle_area_mm2))
    pixels, spine, normal, width, length = _band_template(rng, area_px)
    density_range = cfg.fiber_density_dense if severity == Severity.DENSE else cfg.fiber_density_moderate
    density = float(rng.uniform(*density_range))

    if parent is None:
        walk = random_walk(rng, cfg.n_sections, cfg.drift_px_per_section / 2.0)
        parent_swept = None
    else:
        # satellites travel with their parent so the pair stays adjacent in every section
        walk = parent.walk
        parent_swept = placer.swept(parent.pixels, parent.anchor, parent.walk)
        parent_dt = ndimage.distance_transform_edt(~parent_swept)
        gap_lo, gap_hi = (res.um_to_px(g) for g in cfg.satellite_gap_um)
        reach = np.argwhere((parent_dt > width / 2) & (parent_dt < length / 2 + gap_hi + width))

    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        if parent_swept is None:
            if len(wm_candidates) == 0:
                break
            anchor = wm_candidates[rng.integers(len(wm_candidates))].astype(np.int64)
        else:
            if len(reach) == 0:
                break
            anchor = reach[rng.integers(len(reach))].astype(np.int64)
        swept = placer.swept(pixels, anchor, walk)
        if swept is None or not placer.fits(swept):
            continue
        if parent_swept is not None:
            gap = parent_dt[swept].min()
            if not gap_lo <= gap <= gap_hi:
                continue
        placer.occupy(swept)
        return BundlePlan(severity, pixels, spine, normal, width, length, density, anchor, walk)

    raise GenerationError(
        f"could not place a {severity.value} bundle of {area_px:.0f} px in a "
        f"{cfg.image_size[0]}x{cfg.image_size[1]} image after {MAX_PLACEMENT_ATTEMPTS} attempts"
    )


def bundle_offset(plan: StackPlan, bundle: BundlePlan, index: int) -> np.ndarray:
    return bundle.anchor + plan.global_walk[index] + bundle.walk[index]


def _texture(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return field_ / (field_.std() + 1e-8)


def _render_fibers(rng, shape, bundle: BundlePlan, offset: np.ndarray, band: np.ndarray) -> np.ndarray:
    """Anti-aliased streaks along the bundle spine until the core coverage reaches the density."""
    alpha = np.zeros(shape, dtype=np.float32)
    band_area = max(int(band.sum()), 1)
    h, w = shape
    t = np.linspace(0.0, 1.0, len(bundle.spine))
    for _ in range(MAX_FIBERS_PER_BUNDLE):
        if ((alpha > FIBER_CORE_ALPHA) & band).sum() / band_area >= bundle.density:
            break
        lane = rng.uniform(-0.5, 0.5) * bundle.width
        wobble = rng.uniform(0.0, 0.08) * bundle.width * np.sin(
            2 * np.pi * t * rng.uniform(1.0, 3.0) + rng.uniform(0, 2 * np.pi))
        start, stop = sorted(rng.uniform(0.0, 1.0, size=2))
        stop = max(stop, start + 0.4)
        keep = (t >= start) & (t <= stop)
        points = bundle.spine[keep] + (lane + wobble[keep])[:, None] * bundle.normal + offset
        points = np.round(points[::3]).astype(int)
        for (r0, c0), (r1, c1) in zip(points[:-1], points[1:]):
            rr, cc, val = line_aa(r0, c0, r1, c1)
            inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            rr, cc, val = rr[inside], cc[inside], val[inside]
            alpha[rr, cc] = np.maximum(alpha[rr, cc], val.astype(np.float32))
    return alpha * band


def _stipple_blob(rng, shape, center, radii, tissue: np.ndarray) -> np.ndarray:
    """Diffuse stippled terminal-field blob (alpha layer)."""
    blob = _ellipse_mask(shape, center, radii) & tissue
    dots = (rng.random(shape) < 0.12) & blob
    alpha = dots * rng.uniform(0.5, 0.9, size=shape)
    alpha = ndimage.gaussian_filter(alpha, 0.6) * 1.8
    return np.clip(alpha + 0.12 * ndimage.gaussian_filter(blob.astype(float), 4.0), 0.0, 0.95)


def generate_section(cfg: SynthConfig, index: int) -> SectionRecord:
    """Render section ``index`` of the stack described by ``cfg`` (fully charted)."""
    if not 0 <= index < cfg.n_sections:
        raise ValueError(f"index {index} outside [0, {cfg.n_sections})")
    plan = plan_stack(cfg)
    res = cfg.resolution
    shape = plan.shape
    rng = np.random.default_rng([cfg.seed, 0xF1BE, index])
    shift = plan.global_walk[index].astype(float)

    tissue = _ellipse_mask(shape, plan.center + shift, plan.tissue_radii)
    wm = _ellipse_mask(shape, plan.center + shift, plan.wm_radii)
    ventricle = _ellipse_mask(shape, plan.center + shift + plan.ventricle_offset, plan.ventricle_radii)
    wm &= ~ventricle

    coarse = _texture(rng, shape, 8.0)[..., None]
    fine = _texture(rng, shape, 1.5)[..., None]
    image = np.broadcast_to(BACKGROUND_RGB, shape + (3,)).copy()
    image[tissue & ~wm] = GM_RGB
    image[wm] = WM_RGB
    image[ventricle] = BACKGROUND_RGB
    in_tissue = (tissue & ~ventricle)[..., None]
    image += in_tissue * (6.0 * coarse + 3.0 * fine)

    charting = np.zeros(shape, dtype=np.uint8)
    fiber_alpha = np.zeros(shape, dtype=np.float32)
    bundle_union = np.zeros(shape, dtype=bool)
    for bundle in plan.bundles:
        offset = bundle_offset(plan, bundle, index)
        coords = bundle.pixels + offset
        coords = coords[(coords >= 0).all(axis=1) & (coords[:, 0] < shape[0]) & (coords[:, 1] < shape[1])]
        band = np.zeros(shape, dtype=bool)
        band[coords[:, 0], coords[:, 1]] = True
        label = LABEL_DENSE if bundle.severity == Severity.DENSE else LABEL_MODERATE
        charting[band] = np.maximum(charting[band], label)
        bundle_union |= band
        fiber_alpha = np.maximum(fiber_alpha, _render_fibers(rng, shape, bundle, offset, band))

    confounder_alpha = _confounders(rng, cfg, shape, tissue & ~ventricle, bundle_union)
    alpha = np.maximum(fiber_alpha, confounder_alpha)[..., None] * 0.85
    image = image * (1.0 - alpha) + FIBER_RGB * alpha

    image = _glare(rng, cfg, image, tissue)
    image += rng.normal(0.0, 2.5, size=image.shape)
    image = np.clip(np.round(image), 0, 255).astype(np.uint8)

    return SectionRecord(
        id=f"{cfg.macaque_id}-s{index:03d}",
        macaque_id=cfg.macaque_id,
        rostrocaudal_index=index,
        image=image,
        resolution=res,
        charting=charting,
        tissue_mask=tissue,
        wm_mask=wm,
        ventricle_mask=ventricle,
        charted=True,
    )


def _confounders(rng, cfg: SynthConfig, shape, tissue: np.ndarray, bundles: np.ndarray) -> np.ndarray:
    res = cfg.resolution
    alpha = np.zeros(shape, dtype=np.float32)
    clearance = ndimage.distance_transform_edt(~bundles) if bundles.any() else np.full(shape, np.inf)
    allowed = np.argwhere(tissue & (clearance > res.um_to_px(cfg.confounder_clearance_um)))
    if len(allowed) == 0:
        return alpha

    for _ in range(3):
        if rng.random() >= cfg.terminal_field_rate:
            continue
        radius = np.sqrt(res.mm2_to_pixels(rng.uniform(*cfg.terminal_field_area_mm2)) / np.pi)
        radii = radius * np.array([rng.uniform(0.7, 1.3), 1.0])
        center = allowed[rng.integers(len(allowed))]
        # keep the whole blob outside the clearance zone
        reach = clearance[max(0, int(center[0] - radii[0])):int(center[0] + radii[0]) + 1,
                          max(0, int(center[1] - radii[1])):int(center[1] + radii[1]) + 1]
        if reach.size and reach.min() <= res.um_to_px(cfg.confounder_clearance_um) * 0.8:
            continue
        alpha = np.maximum(alpha, _stipple_blob(rng, shape, center, radii, tissue))

    n_speckle = int(cfg.artifact_rate * 400)
    if n_speckle:
        spots = allowed[rng.integers(len(allowed), size=n_speckle)]
        alpha[spots[:, 0], spots[:, 1]] = np.maximum(alpha[spots[:, 0], spots[:, 1]], 0.8)
    for _ in range(int(round(cfg.artifact_rate * 6))):
        center = allowed[rng.integers(len(allowed))]
        r = rng.uniform(2.0, 5.0)
        dust = _ellipse_mask(shape, center, (r, r * rng.uniform(0.6, 1.4)))
        alpha[dust] = np.maximum(alpha[dust], 0.9)
    return alpha


def _glare(rng, cfg: SynthConfig, image: np.ndarray, tissue: np.ndarray) -> np.ndarray:
    if rng.random() >= cfg.artifact_rate:
        return image
    h, w = tissue.shape
    center = (rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w)
    radii = (rng.uniform(0.04, 0.09) * h, rng.uniform(0.04, 0.09) * w)
    patch = ndimage.gaussian_filter(_ellipse_mask(tissue.shape, center, radii).astype(float), 6.0)
    return image + (255.0 - image) * (0.45 * patch)[..., None]


def generate_stack(cfg: SynthConfig, jobs: int = 1) -> List[SectionRecord]:
    """All ``n_sections`` sections, ordered rostro-caudally."""
    plan_stack(cfg)
    indices = range(cfg.n_sections)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda i: generate_section(cfg, i), indices))
    return [generate_section(cfg, i) for i in indices]


def assign_splits(n_sections: int, n_labeled: int, n_heldout: int) -> Tuple[List[int], List[int]]:
    """Evenly spaced (labeled, held-out) indices; everything else is unlabeled training data."""
    heldout = []
    if n_heldout:
        heldout = sorted(set(np.linspace(1, max(n_sections - 2, 1), n_heldout).round().astype(int).tolist()))
    rest = [i for i in range(n_sections) if i not in heldout]
    labeled = []
    if n_labeled:
        picks = np.linspace(0, len(rest) - 1, n_labeled + 2)[1:-1].round().astype(int)
        labeled = sorted({rest[p] for p in picks})
    return labeled, heldout


def apply_splits(sections: Sequence[SectionRecord], cfg: SynthConfig) -> List[SectionRecord]:
    """Withhold charting from unlabeled training sections and tag held-out ones as test."""
    labeled, heldout = assign_splits(len(sections), cfg.n_labeled, cfg.n_heldout)
    out = []
    for i, section in enumerate(sections):
        if i in heldout:
            out.append(replace(section, split='test'))
        elif i in labeled:
            out.append(replace(section, split='train'))
        else:
            out.append(replace(section.without_charting(), split='train'))
    return out


def write_dataset(sections: Sequence[SectionRecord], out_dir: Path) -> Path:
    """Write PNG rasters plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"cannot create dataset directory {out_dir}: {e}") from e
    entries = [save_section(section, out_dir) for section in sections]
    manifest_path = write_manifest(entries, out_dir / MANIFEST_NAME)
    logger.info(f"Wrote {len(entries)} sections to {manifest_path}")
    return manifest_path
