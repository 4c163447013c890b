"""Core domain types, raster geometry and dataset I/O for fiber bundle detection."""

__version__ = "0.4.0"
