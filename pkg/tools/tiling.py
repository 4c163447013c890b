# tools/tiling.py
"""Overlapping tiles over whole sections and overlap-averaged stitching."""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from tiler import Tiler

from core.domain import ProbabilityMap, SectionRecord
from core.errors import ShapeMismatchError, StitchError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TileSpec:
    tile_size: int = 1024
    overlap_px: int = 64
    threshold: float = 0.4

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError(f"tile_size must be positive, got {self.tile_size}")
        if not 0 <= self.overlap_px < self.tile_size:
            raise ValueError(f"overlap_px must be in [0, tile_size), got {self.overlap_px}")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must be in (0, 1], got {self.threshold}")


def _tile_shape(dims: Tuple[int, int], spec: TileSpec) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """Per-axis tile side and overlap; axes shorter than a tile are used whole."""
    sides, overlaps = [], []
    for dim in dims:
        side = min(spec.tile_size, dim)
        sides.append(side)
        overlaps.append(spec.overlap_px if side == spec.tile_size and dim > side else 0)
    return (sides[0], sides[1]), (overlaps[0], overlaps[1])


def tile_section(section: SectionRecord, spec: TileSpec = TileSpec()) -> List[Tuple[np.ndarray, Tuple[int, int]]]:
    """
    Split the section image into tiles with their (row, col) origins.

    Tiles never change shape; the last tile along an axis is padded by
    reflection past the section border, and ``stitch`` crops it back.
    """
    image = section.image
    h, w = section.shape
    (th, tw), (oh, ow) = _tile_shape((h, w), spec)
    if (th, tw) == (h, w):
        return [(image, (0, 0))]

    tiler = Tiler(
        data_shape=image.shape,
        tile_shape=(th, tw, image.shape[2]),
        overlap=(oh, ow, 0),
        channel_dimension=2,
        mode='reflect',
    )
    tiles = []
    for tile_id in range(tiler.n_tiles):
        origin = tiler.get_tile_bbox(tile_id)[0]
        tiles.append((tiler.get_tile(image, tile_id), (int(origin[0]), int(origin[1]))))
    logger.debug(f"Section {section.id}: {len(tiles)} tiles of {th}x{tw}")
    return tiles


def stitch(tile_maps: Sequence[np.ndarray], origins: Sequence[Tuple[int, int]],
           section_dims: Tuple[int, int], section_id: str = '') -> ProbabilityMap:
    """Average overlapping tile probabilities into one section-sized map."""
    if len(tile_maps) != len(origins):
        raise ShapeMismatchError(f"{len(tile_maps)} tile maps for {len(origins)} origins")
    h, w = section_dims
    total = np.zeros((h, w), dtype=np.float64)
    visits = np.zeros((h, w), dtype=np.int32)
    for tile, (r, c) in zip(tile_maps, origins):
        tile = np.asarray(tile, dtype=np.float64)
        if tile.ndim != 2:
            raise ShapeMismatchError(f"tile maps must be 2-D, got shape {tile.shape}")
        r, c = int(r), int(c)
        rh, cw = min(tile.shape[0], h - r), min(tile.shape[1], w - c)
        if r < 0 or c < 0 or rh <= 0 or cw <= 0:
            raise StitchError(f"tile origin ({r}, {c}) lies outside the {h}x{w} section")
        total[r:r + rh, c:c + cw] += tile[:rh, :cw]
        visits[r:r + rh, c:c + cw] += 1

    uncovered = int((visits == 0).sum())
    if uncovered:
        raise StitchError(f"{uncovered} pixels of section {section_id or '?'} are not covered by any tile")
    return ProbabilityMap(np.clip(total / visits, 0.0, 1.0).astype(np.float32), section_id)
