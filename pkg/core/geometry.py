"""Raster geometry: 8-connected components, physical areas and distance transforms."""

from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from core.domain import (
    LABEL_DENSE,
    LABEL_MODERATE,
    BundleRegion,
    Resolution,
    Severity,
)

EIGHT_CONNECTIVITY = np.ones((3, 3), dtype=bool)


def label_components(mask: np.ndarray) -> Tuple[np.ndarray, int]:
    """Label 8-connected foreground components."""
    return ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTIVITY)


def connected_components(mask: np.ndarray,
                         resolution: Optional[Resolution] = None,
                         severity: Severity = Severity.PREDICTED,
                         probabilities: Optional[np.ndarray] = None) -> List[BundleRegion]:
    """Partition the foreground of ``mask`` into 8-connected regions in raster-scan order."""
    resolution = resolution or Resolution()
    labels, count = label_components(mask)
    if count == 0:
        return []

    regions = []
    for index, window in enumerate(ndimage.find_objects(labels), start=1):
        if window is None:
            continue
        local = np.argwhere(labels[window] == index)
        local[:, 0] += window[0].start
        local[:, 1] += window[1].start
        regions.append(BundleRegion.from_pixels(local, resolution, severity, probabilities))
    return regions


def area_mm2(region: BundleRegion, resolution: Resolution) -> float:
    return region.size * resolution.microns_per_pixel ** 2 * 1e-6


def distance_transform(mask: np.ndarray, resolution: Optional[Resolution] = None) -> np.ndarray:
    """Euclidean distance in micrometres to the nearest foreground pixel (+inf if none)."""
    resolution = resolution or Resolution()
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.full(mask.shape, np.inf, dtype=np.float64)
    step = resolution.microns_per_pixel
    return ndimage.distance_transform_edt(~mask, sampling=(step, step))


def regions_to_mask(regions: List[BundleRegion], shape: Tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for region in regions:
        mask[region.pixels[:, 0], region.pixels[:, 1]] = True
    return mask


def charted_regions(charting: Optional[np.ndarray],
                    resolution: Resolution) -> Tuple[List[BundleRegion], List[BundleRegion]]:
    """Split a {0,1,2} charting raster into (dense, moderate) regions."""
    if charting is None:
        return [], []
    dense = connected_components(charting == LABEL_DENSE, resolution, Severity.DENSE)
    moderate = connected_components(charting == LABEL_MODERATE, resolution, Severity.MODERATE)
    return dense, moderate


def disk(radius_px: float) -> np.ndarray:
    """Boolean disk structuring element of the given radius."""
    r = max(int(np.ceil(radius_px)), 0)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy ** 2 + xx ** 2) <= radius_px ** 2 + 1e-9


def translate(raster: np.ndarray, dy: int, dx: int, fill=0) -> np.ndarray:
    """Integer translation with constant fill; content moves by (+dy, +dx)."""
    out = np.full_like(raster, fill)
    h, w = raster.shape[:2]
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[dst_r, dst_c] = raster[src_r, src_c]
    return out


def estimate_tissue_mask(gray: np.ndarray, margin: float = 0.04) -> np.ndarray:
    """Tissue by intensity: the slide background is the brightest mode, tissue is darker."""
    background = np.percentile(gray, 99)
    return gray < background - margin


def tissue_mask_of(section) -> np.ndarray:
    """The section's tissue mask, or an intensity estimate when the record has none."""
    if section.tissue_mask is not None:
        return section.tissue_mask
    return estimate_tissue_mask(section.grayscale())
