"""Urban development scoring from Sentinel-2 imagery.

The pipeline: geohash cells define the spatial unit, the catalog picks one
least-cloud scene per half-year window, rasters become RGB composites, a
reference-calibrated and temporally anchored scoring backend turns them
into a 0-10 series per cell, and NDBI provides the pixel-index baseline to
compare against.
"""

__version__ = "0.1.0"

from .catalog import CatalogSource, Period, SceneRecord  # noqa: F401
from .errors import AuiError  # noqa: F401
from .geogrid import GeohashCell, decode, encode  # noqa: F401
