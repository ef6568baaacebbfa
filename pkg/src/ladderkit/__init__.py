"""Per-sequence bitrate ladder construction and reduced-encode estimation."""

from importlib.metadata import PackageNotFoundError, version

from .core import (EncodeRecord, LadderkitError, MeasurementSet, Resolution, ValidationError,
                   load_measurements, save_measurements)

try:
    __version__ = version("artifact")
except PackageNotFoundError:
    __version__ = "0.0.0"

__all__ = ["EncodeRecord", "LadderkitError", "MeasurementSet", "Resolution", "ValidationError",
           "load_measurements", "save_measurements", "__version__"]
