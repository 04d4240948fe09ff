"""Geohash encoding/decoding and cell geometry.

The pipeline's spatial unit is the precision-5 geohash cell (roughly
4.89 km x 4.89 km near the equator). Standard bit interleaving is used,
longitude bit first, so codes resolve the same way as in public geohash
tooling. Cells are half-open rectangles [min, max): a point on a shared
edge belongs to the cell with the larger coordinate, which makes the grid
a partition. The only exception is the global top edge (lat 90 / lon 180),
which has no cell above it and is treated as closed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InputError, ParseError

GEOHASH_ALPHABET = "0123456789bcdefghjkmnpqrstuvwxyz"
_CHAR_INDEX = {c: i for i, c in enumerate(GEOHASH_ALPHABET)}

MAX_PRECISION = 12

#: Mean Earth radius in kilometres (IUGG R1).
EARTH_RADIUS_KM = 6371.0088


@dataclass(frozen=True)
class GeohashCell:
    """A geohash grid cell: its code and exact bounding box in degrees."""

    code: str
    precision: int
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    @property
    def bbox(self):
        """(lat_min, lat_max, lon_min, lon_max)."""
        return (self.lat_min, self.lat_max, self.lon_min, self.lon_max)

    @property
    def center(self):
        return (
            (self.lat_min + self.lat_max) / 2.0,
            (self.lon_min + self.lon_max) / 2.0,
        )

    def contains(self, lat, lon):
        """Half-open containment; the global top edges are closed."""
        lat_ok = self.lat_min <= lat < self.lat_max or (
            self.lat_max == 90.0 and lat == 90.0
        )
        lon_ok = self.lon_min <= lon < self.lon_max or (
            self.lon_max == 180.0 and lon == 180.0
        )
        return lat_ok and lon_ok


def encode(lat, lon, precision):
    """Encode a point into the geohash cell containing it.

    Longitude is refined on even bit positions (the first bit), latitude on
    odd ones; boundary values fall into the upper half.
    """
    if not (-90.0 <= lat <= 90.0):
        raise InputError(f"latitude {lat} outside [-90, 90]")
    if not (-180.0 <= lon <= 180.0):
        raise InputError(f"longitude {lon} outside [-180, 180]")
    if not isinstance(precision, int) or not (1 <= precision <= MAX_PRECISION):
        raise InputError(f"precision {precision} outside [1, {MAX_PRECISION}]")

    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    chars = []
    index = 0
    even = True  # longitude bit next
    nbits = 0
    while len(chars) < precision:
        if even:
            mid = (lon_lo + lon_hi) / 2.0
            if lon >= mid:
                index = (index << 1) | 1
                lon_lo = mid
            else:
                index <<= 1
                lon_hi = mid
        else:
            mid = (lat_lo + lat_hi) / 2.0
            if lat >= mid:
                index = (index << 1) | 1
                lat_lo = mid
            else:
                index <<= 1
                lat_hi = mid
        even = not even
        nbits += 1
        if nbits == 5:
            chars.append(GEOHASH_ALPHABET[index])
            index = 0
            nbits = 0

    return GeohashCell(
        code="".join(chars),
        precision=precision,
        lat_min=lat_lo,
        lat_max=lat_hi,
        lon_min=lon_lo,
        lon_max=lon_hi,
    )


def decode(code):
    """Decode a geohash code into its exact cell rectangle.

    Uppercase input is accepted and normalised; any character outside the
    32-character geohash alphabet is a parse error.
    """
    if not isinstance(code, str) or len(code) == 0:
        raise ParseError("geohash code must be a non-empty string")
    code = code.lower()
    if len(code) > MAX_PRECISION:
        raise ParseError(f"geohash code longer than {MAX_PRECISION} characters")

    lat_lo, lat_hi = -90.0, 90.0
    lon_lo, lon_hi = -180.0, 180.0
    even = True
    for ch in code:
        try:
            index = _CHAR_INDEX[ch]
        except KeyError:
            raise ParseError(f"invalid geohash character {ch!r} in {code!r}") from None
        for shift in range(4, -1, -1):
            bit = (index >> shift) & 1
            if even:
                mid = (lon_lo + lon_hi) / 2.0
                if bit:
                    lon_lo = mid
                else:
                    lon_hi = mid
            else:
                mid = (lat_lo + lat_hi) / 2.0
                if bit:
                    lat_lo = mid
                else:
                    lat_hi = mid
            even = not even

    return GeohashCell(
        code=code,
        precision=len(code),
        lat_min=lat_lo,
        lat_max=lat_hi,
        lon_min=lon_lo,
        lon_max=lon_hi,
    )


def cell_dimensions_km(cell):
    """Great-circle (width_km, height_km) of a cell on the mean-radius sphere.

    Width is measured along the parallel through the cell center, so it
    shrinks with cos(latitude); height is the meridional arc of the cell's
    latitude span and does not depend on longitude.
    """
    center_lat, _ = cell.center
    dlat = math.radians(cell.lat_max - cell.lat_min)
    dlon = math.radians(cell.lon_max - cell.lon_min)
    height = EARTH_RADIUS_KM * dlat
    width = EARTH_RADIUS_KM * math.cos(math.radians(center_lat)) * dlon
    return (width, height)
