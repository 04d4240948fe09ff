"""Exception hierarchy shared across the pipeline.

Every error raised by this package derives from :class:`AuiError` so callers
can distinguish pipeline failures from programming errors.
"""

from __future__ import annotations


class AuiError(Exception):
    """Base class for all errors raised by this package."""


class InputError(AuiError):
    """An argument violates a documented precondition."""


class ConfigError(AuiError):
    """A run configuration is invalid or incomplete."""


class ParseError(AuiError):
    """Malformed input data (geohash string, manifest, catalog page, TIFF)."""


class UnsupportedFormatError(AuiError):
    """A file uses a feature outside the supported set; names the offender."""


class TransportError(AuiError):
    """A network operation failed after retries."""

    def __init__(self, message, *, attempts=None, last_status=None):
        super().__init__(message)
        self.attempts = attempts
        self.last_status = last_status


class NoSceneError(AuiError):
    """No usable scene for a (cell, period); callers record this as a gap."""

    def __init__(self, cell_code=None, period_label=None):
        super().__init__(
            f"no scene available for cell={cell_code!r} period={period_label!r}"
        )
        self.cell_code = cell_code
        self.period_label = period_label


class BandMissingError(AuiError):
    """A required spectral band is absent from a scene."""

    def __init__(self, band, context=""):
        msg = f"band {band} missing" + (f" ({context})" if context else "")
        super().__init__(msg)
        self.band = band


class GeometryError(AuiError):
    """Raster grids do not line up (extent or resolution mismatch)."""


class NoValidPixelsError(AuiError):
    """A statistic is undefined because every pixel is masked."""


class ConflictError(AuiError):
    """An append would silently replace an existing observation."""


class ScoringError(AuiError):
    """The model response never satisfied the output contract."""

    def __init__(self, message, *, raw_text=None, attempts=None):
        super().__init__(message)
        self.raw_text = raw_text
        self.attempts = attempts


class BackendError(AuiError):
    """The model backend is unreachable or returned a transport-level failure."""
