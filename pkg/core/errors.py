# core/errors.py


class FiberDetectError(Exception):
    """Base class for every error raised by the toolkit."""


class GenerationError(FiberDetectError):
    """Synthetic section could not be generated with the requested layout."""


class ShapeMismatchError(FiberDetectError, ValueError):
    """Two rasters/tensors that must be aligned have different shapes."""


class ZeroVectorError(FiberDetectError, ValueError):
    """Cosine similarity requested for a zero-norm vector."""


class ManifestError(FiberDetectError):
    """Dataset manifest is malformed or points to unreadable files."""


class DatasetIOError(FiberDetectError, OSError):
    """Reading or writing a raster/manifest failed. Always names the file."""


class EmptyDatasetError(FiberDetectError):
    """An operation received no usable sections."""


class SamplingError(FiberDetectError):
    """Patch sampler cannot satisfy the requested class composition."""


class CheckpointError(FiberDetectError):
    """Generic checkpoint failure."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint file is truncated or not a checkpoint at all."""


class TrainingError(FiberDetectError):
    """Training cannot start or produced non-finite losses."""


class StitchError(FiberDetectError):
    """Tiles passed to the stitcher leave pixels uncovered."""


class PriorModelError(FiberDetectError):
    """Continuity prior requested without a trained prior model."""


class MatchError(FiberDetectError):
    """Regions passed as a matched pair do not overlap."""


class DegenerateRegionError(FiberDetectError, ValueError):
    """Region too small (1-pixel wide bounding box) for density measurement."""


class ConfigError(FiberDetectError):
    """A run configuration value was rejected. Names the configuration section."""
