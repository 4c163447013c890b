"""
Domain types shared by every pipeline stage.

Rasters are numpy arrays indexed (row, col). Physical thresholds are always
expressed in micrometres or millimetres and converted with a ``Resolution``.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Optional, Tuple

import numpy as np

from core.errors import ShapeMismatchError

NATIVE_MICRONS_PER_PIXEL = 0.4
INPLANE_DOWNSAMPLE = 4
DEFAULT_MICRONS_PER_PIXEL = NATIVE_MICRONS_PER_PIXEL * INPLANE_DOWNSAMPLE  # 1.6 um/px
DEFAULT_SECTION_GAP_UM = 400.0

LABEL_BACKGROUND = 0
LABEL_MODERATE = 1
LABEL_DENSE = 2
VALID_LABELS = (LABEL_BACKGROUND, LABEL_MODERATE, LABEL_DENSE)


class Severity(str, Enum):
    DENSE = 'dense'
    MODERATE = 'moderate'
    PREDICTED = 'predicted-unclassified'


SEVERITY_LABELS = {Severity.DENSE: LABEL_DENSE, Severity.MODERATE: LABEL_MODERATE}


@dataclass(frozen=True)
class Resolution:
    microns_per_pixel: float = DEFAULT_MICRONS_PER_PIXEL
    section_gap_um: float = DEFAULT_SECTION_GAP_UM

    def __post_init__(self):
        if not self.microns_per_pixel > 0:
            raise ValueError(f"microns_per_pixel must be > 0, got {self.microns_per_pixel}")
        if not self.section_gap_um > 0:
            raise ValueError(f"section_gap_um must be > 0, got {self.section_gap_um}")

    def um_to_px(self, microns: float) -> float:
        return microns / self.microns_per_pixel

    def mm_to_px(self, millimetres: float) -> float:
        return millimetres * 1000.0 / self.microns_per_pixel

    def pixel_area_mm2(self) -> float:
        return self.microns_per_pixel ** 2 * 1e-6

    def mm2_to_pixels(self, area_mm2: float) -> float:
        return area_mm2 / self.pixel_area_mm2()

    def scaled(self, factor: float) -> 'Resolution':
        """Resolution after downsampling in-plane by ``factor``."""
        return replace(self, microns_per_pixel=self.microns_per_pixel * factor)

    def to_dict(self) -> Dict[str, float]:
        return {'microns_per_pixel': self.microns_per_pixel, 'section_gap_um': self.section_gap_um}


def _check_binary_shape(name: str, raster: Optional[np.ndarray], shape: Tuple[int, int]) -> Optional[np.ndarray]:
    if raster is None:
        return None
    raster = np.asarray(raster)
    if raster.shape != shape:
        raise ShapeMismatchError(f"{name} has shape {raster.shape}, expected {shape}")
    return raster.astype(bool)


@dataclass
class SectionRecord:
    """One coronal section with its optional charting and anatomical masks."""

    id: str
    macaque_id: str
    rostrocaudal_index: int
    image: np.ndarray
    resolution: Resolution = field(default_factory=Resolution)
    charting: Optional[np.ndarray] = None
    tissue_mask: Optional[np.ndarray] = None
    wm_mask: Optional[np.ndarray] = None
    ventricle_mask: Optional[np.ndarray] = None
    charted: bool = False
    split: str = 'train'
    # synthetic sections only: ground truth kept for oracle priors when charting is withheld
    oracle_charting: Optional[np.ndarray] = None

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 3 or self.image.shape[2] != 3 or self.image.dtype != np.uint8:
            raise ShapeMismatchError(
                f"section {self.id}: image must be HxWx3 uint8, got {self.image.shape} {self.image.dtype}"
            )
        shape = self.shape
        if (self.charting is not None) != bool(self.charted):
            raise ValueError(f"section {self.id}: charting must be present iff charted is true")
        if self.charting is not None:
            self.charting = self._check_labels('charting', self.charting)
        if self.oracle_charting is not None:
            self.oracle_charting = self._check_labels('oracle_charting', self.oracle_charting)
        self.tissue_mask = _check_binary_shape('tissue_mask', self.tissue_mask, shape)
        self.wm_mask = _check_binary_shape('wm_mask', self.wm_mask, shape)
        self.ventricle_mask = _check_binary_shape('ventricle_mask', self.ventricle_mask, shape)

    def _check_labels(self, name: str, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels)
        if labels.shape != self.shape:
            raise ShapeMismatchError(f"section {self.id}: {name} shape {labels.shape} != {self.shape}")
        if not np.isin(labels, VALID_LABELS).all():
            raise ValueError(f"section {self.id}: {name} contains labels outside {VALID_LABELS}")
        return labels.astype(np.uint8)

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.image.shape[0]), int(self.image.shape[1])

    def grayscale(self) -> np.ndarray:
        """Luminance in [0, 1]."""
        rgb = self.image.astype(np.float32) / 255.0
        return rgb @ np.array([0.299, 0.587, 0.114], dtype=np.float32)

    def fiber_mask(self) -> np.ndarray:
        """Binary charting (both severities) or an all-false raster when uncharted."""
        if self.charting is None:
            return np.zeros(self.shape, dtype=bool)
        return self.charting > LABEL_BACKGROUND

    def reference_charting(self) -> Optional[np.ndarray]:
        return self.charting if self.charting is not None else self.oracle_charting

    def without_charting(self) -> 'SectionRecord':
        """Unlabeled copy; the charting is kept only as oracle ground truth."""
        return replace(self, charting=None, charted=False, oracle_charting=self.reference_charting())


@dataclass
class BundleRegion:
    """An 8-connected detected or charted region."""

    pixels: np.ndarray
    area_mm2: float
    centroid: Tuple[float, float]
    severity: Severity = Severity.PREDICTED
    mean_probability: float = 0.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        if len(self.pixels) == 0:
            raise ValueError("BundleRegion requires at least one pixel")
        self.severity = Severity(self.severity)

    @classmethod
    def from_pixels(cls, pixels: np.ndarray, resolution: Resolution,
                    severity: Severity = Severity.PREDICTED,
                    probabilities: Optional[np.ndarray] = None) -> 'BundleRegion':
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        if len(pixels) == 0:
            raise ValueError("BundleRegion requires at least one pixel")
        centroid = pixels.mean(axis=0)
        mean_prob = 0.0
        if probabilities is not None:
            mean_prob = float(probabilities[pixels[:, 0], pixels[:, 1]].mean())
        return cls(
            pixels=pixels,
            area_mm2=len(pixels) * resolution.pixel_area_mm2(),
            centroid=(float(centroid[0]), float(centroid[1])),
            severity=severity,
            mean_probability=mean_prob,
        )

    @property
    def size(self) -> int:
        return int(len(self.pixels))

    @property
    def bbox(self) -> Tuple[int, int, int, int]:
        """(row0, col0, row1, col1) with exclusive upper bounds."""
        lo = self.pixels.min(axis=0)
        hi = self.pixels.max(axis=0) + 1
        return int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])

    def to_mask(self, shape: Tuple[int, int]) -> np.ndarray:
        mask = np.zeros(shape, dtype=bool)
        mask[self.pixels[:, 0], self.pixels[:, 1]] = True
        return mask

    def pixel_set(self) -> set:
        return set(map(tuple, self.pixels.tolist()))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'area_mm2': round(float(self.area_mm2), 6),
            'centroid': [round(self.centroid[0], 4), round(self.centroid[1], 4)],
            'severity': self.severity.value,
            'mean_probability': round(float(self.mean_probability), 6),
            'bbox': list(self.bbox),
            'pixels': self.pixels.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BundleRegion':
        return cls(
            pixels=np.asarray(data['pixels'], dtype=np.int64),
            area_mm2=float(data['area_mm2']),
            centroid=tuple(data['centroid']),
            severity=Severity(data.get('severity', Severity.PREDICTED.value)),
            mean_probability=float(data.get('mean_probability', 0.0)),
        )


@dataclass
class ProbabilityMap:
    values: np.ndarray
    section_id: str = ''

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ShapeMismatchError(f"probability map must be 2-D, got shape {values.shape}")
        if not np.isfinite(values).all() or values.min(initial=0.0) < 0.0 or values.max(initial=0.0) > 1.0:
            raise ValueError(f"probability map {self.section_id!r} has values outside [0, 1]")
        self.values = values

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.values.shape[0]), int(self.values.shape[1])

    def threshold(self, threshold: float) -> np.ndarray:
        """Foreground is strictly above the threshold so 1.0 always yields an empty mask."""
        return self.values > threshold
