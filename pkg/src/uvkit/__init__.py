"""Urban-village mapping toolkit.

A pipeline for mapping dense informal settlements in city-scale imagery:
raster/vector geometry primitives, similarity-ranked sample selection,
prompt generation for a promptable segmentation backend, refinement
orchestration, hex-sampled accuracy assessment, and cross-city statistics,
plus a synthetic-city generator that makes the whole chain testable
without imagery or model weights.
"""

from .config import PipelineConfig
from .errors import (
    BackendError,
    BackendResponseError,
    BackendTransportError,
    ConfigError,
    FrameMismatchError,
    InfeasiblePackingError,
    InputError,
    UvkitError,
)

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "BackendResponseError",
    "BackendTransportError",
    "ConfigError",
    "FrameMismatchError",
    "InfeasiblePackingError",
    "InputError",
    "PipelineConfig",
    "UvkitError",
    "__version__",
]
