"""Exception taxonomy shared across the toolkit.

CLI exit-code mapping: ConfigError and InputError (and plain ValueError from
validation) exit 1; BackendError subclasses exit 2 once the fallback budget
is exhausted.
"""

from __future__ import annotations


class UvkitError(Exception):
    """Base class for all toolkit errors."""


class InputError(UvkitError):
    """Bad operator input: missing file, malformed geometry, bad arguments."""


class ConfigError(UvkitError):
    """Invalid or out-of-range configuration value."""


class FrameMismatchError(UvkitError):
    """Two rasters were combined but their grids do not coincide."""


class BackendError(UvkitError):
    """Base class for failures while talking to a segmentation backend."""

    def __init__(self, message: str, tile_id: str | None = None):
        super().__init__(message)
        self.tile_id = tile_id


class BackendTransportError(BackendError):
    """The backend could not be reached or did not answer in time."""


class BackendResponseError(BackendError):
    """The backend answered, but the payload failed validation."""


class InfeasiblePackingError(UvkitError):
    """Scene generation could not place the requested objects."""
