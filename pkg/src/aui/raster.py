"""Scene rasters: band loading, reflectance, resolution harmonization, RGB export.

Scenes are assumed pre-clipped to their grid cell by the provider (or by the
synthetic generator), so no reprojection happens here; bands merely have to
agree on geographic extent while their grid dimensions differ by resolution.
"""

from __future__ import annotations

import io
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    BandMissingError,
    GeometryError,
    InputError,
)
from .tiff import read_tiff

#: Sentinel-2 sample order assumed when a multi-sample TIFF carries no
#: explicit band-to-sample mapping. L2A products drop B10, which is why
#: per-scene manifests may override this.
S2_BAND_ORDER = (
    "B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B10", "B11", "B12",
)

#: Native ground resolution per band, metres.
BAND_RESOLUTION_M = {
    "B1": 60, "B2": 10, "B3": 10, "B4": 10, "B5": 20, "B6": 20, "B7": 20,
    "B8": 10, "B8A": 20, "B9": 60, "B10": 60, "B11": 20, "B12": 20,
}

REFLECTANCE_SCALE = 10000.0

_BAND_RE = re.compile(r"^[Bb]0?(\d{1,2})([Aa])?$")


def canonical_band(name):
    """Normalise band spellings: 'B04' and 'b4' both mean 'B4'."""
    m = _BAND_RE.match(str(name).strip())
    if not m:
        raise InputError(f"unrecognised band name {name!r}")
    return f"B{int(m.group(1))}" + ("A" if m.group(2) else "")


@dataclass
class BandRaster:
    """One band's digital numbers on its native grid; nodata defaults to DN 0."""

    band: str
    width: int
    height: int
    pixel_size_m: float
    values: np.ndarray
    nodata_value: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.dtype != np.uint16:
            raise InputError(f"band {self.band}: values must be uint16")
        if self.values.shape != (self.height, self.width):
            raise InputError(
                f"band {self.band}: grid shape {self.values.shape} does not match "
                f"{self.height}x{self.width}"
            )
        if self.pixel_size_m not in (10, 20, 60):
            raise InputError(
                f"band {self.band}: pixel size {self.pixel_size_m} m is not a "
                "Sentinel-2 resolution"
            )

    @property
    def valid_mask(self):
        return self.values != self.nodata_value

    @property
    def extent_m(self):
        return (self.width * self.pixel_size_m, self.height * self.pixel_size_m)


@dataclass
class SceneRaster:
    """All loaded bands of one scene; every band covers the same extent."""

    bands: dict
    scene_id: str = ""
    cell: object = None  # GeohashCell, or None for synthetic/unit-test scenes

    def __post_init__(self):
        extents = {b.extent_m for b in self.bands.values()}
        if len(extents) > 1:
            raise GeometryError(
                f"scene {self.scene_id}: bands disagree on extent: {sorted(extents)}"
            )

    def band(self, name):
        name = canonical_band(name)
        try:
            return self.bands[name]
        except KeyError:
            raise BandMissingError(name, context=self.scene_id) from None


@dataclass
class ValueGrid:
    """Real-valued grid plus validity mask (the post-DN representation)."""

    values: np.ndarray  # float64
    valid: np.ndarray  # bool

    @property
    def valid_count(self):
        return int(self.valid.sum())

    def valid_values(self):
        return self.values[self.valid]


@dataclass(frozen=True)
class StretchSpec:
    """Linear stretch applied to reflectance before byte conversion.

    The fixed default (0-0.3 reflectance) keeps the visual baseline constant
    between periods; the percentile mode re-stretches each image and is only
    offered behind an explicit flag because it changes that baseline.
    """

    mode: str = "fixed"  # "fixed" | "percentile"
    lo: float = 0.0
    hi: float = 0.3
    percentiles: tuple = (2.0, 98.0)

    def __post_init__(self):
        if self.mode not in ("fixed", "percentile"):
            raise InputError(f"unknown stretch mode {self.mode!r}")
        if self.mode == "fixed" and not self.lo < self.hi:
            raise InputError("stretch requires lo < hi")


@dataclass
class CompositeImage:
    """8-bit RGB composite; shape (height, width, 3)."""

    width: int
    height: int
    rgb: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb)
        if self.rgb.dtype != np.uint8 or self.rgb.shape != (self.height, self.width, 3):
            raise InputError("composite must be uint8 with shape (height, width, 3)")


def _resolve_asset(ref):
    """An asset reference is a path string or {'path': ..., 'sample': k}."""
    if isinstance(ref, (str, Path)):
        return str(ref), None
    if isinstance(ref, dict) and "path" in ref:
        sample = ref.get("sample")
        return str(ref["path"]), (int(sample) if sample is not None else None)
    raise InputError(f"unusable band asset reference: {ref!r}")


def read_scene(band_assets, required_bands, *, scene_id="", cell=None, base_dir=None):
    """Load the requested bands of one scene from its TIFF assets.

    ``band_assets`` maps band names to either a single-band TIFF path or a
    {'path', 'sample'} reference into a multi-sample TIFF. When a
    multi-sample file carries no explicit sample index, the standard
    Sentinel-2 band order is assumed.
    """
    assets = {canonical_band(k): v for k, v in band_assets.items()}
    cache = {}
    bands = {}
    for name in required_bands:
        name = canonical_band(name)
        if name not in assets:
            raise BandMissingError(name, context=scene_id or "scene")
        path, sample = _resolve_asset(assets[name])
        if base_dir is not None:
            path = str(Path(base_dir) / path)
        if path not in cache:
            try:
                cache[path] = read_tiff(path)
            except OSError as exc:
                raise BandMissingError(
                    name, context=f"asset unreadable: {exc}"
                ) from exc
        img = cache[path]
        if img.values.ndim == 3:
            idx = sample if sample is not None else S2_BAND_ORDER.index(name)
            if not (0 <= idx < img.values.shape[2]):
                raise BandMissingError(
                    name, context=f"sample {idx} outside {path} ({img.values.shape[2]} samples)"
                )
            grid = np.ascontiguousarray(img.values[:, :, idx])
        else:
            grid = img.values
        h, w = grid.shape
        bands[name] = BandRaster(
            band=name,
            width=w,
            height=h,
            pixel_size_m=BAND_RESOLUTION_M[name],
            values=grid.astype(np.uint16),
            nodata_value=img.nodata if img.nodata is not None else 0,
        )
    return SceneRaster(bands=bands, scene_id=scene_id, cell=cell)


def to_reflectance(band):
    """Bottom-of-atmosphere reflectance via the L2A DN/10000 convention."""
    valid = band.valid_mask
    values = band.values.astype(np.float64) / REFLECTANCE_SCALE
    values[~valid] = 0.0
    return ValueGrid(values=values, valid=valid)


def _block_reduce(values, valid, factor):
    h, w = values.shape
    vh, vw = h // factor, w // factor
    v = values.astype(np.float64) * valid
    sums = v.reshape(vh, factor, vw, factor).sum(axis=(1, 3))
    counts = valid.reshape(vh, factor, vw, factor).sum(axis=(1, 3))
    out_valid = counts > 0
    out = np.zeros((vh, vw), dtype=np.float64)
    np.divide(sums, counts, out=out, where=out_valid)
    return ValueGrid(values=out, valid=out_valid)


def harmonize(a, b):
    """Bring two bands of the same extent onto the coarser of their grids.

    The finer band is aggregated by block mean over valid pixels; a block
    with no valid pixels becomes nodata. Returns ValueGrids of raw DN means
    in the argument order.
    """
    if a.extent_m != b.extent_m:
        raise GeometryError(
            f"bands {a.band}/{b.band} cover different extents {a.extent_m} vs {b.extent_m}"
        )

    def as_grid(band):
        return ValueGrid(
            values=band.values.astype(np.float64), valid=band.valid_mask.copy()
        )

    if a.pixel_size_m == b.pixel_size_m:
        if a.values.shape != b.values.shape:
            raise GeometryError("equal-resolution bands with different grid shapes")
        return as_grid(a), as_grid(b)

    fine, coarse = (a, b) if a.pixel_size_m < b.pixel_size_m else (b, a)
    ratio = coarse.pixel_size_m / fine.pixel_size_m
    if ratio != int(ratio):
        raise GeometryError(
            f"resolution ratio {coarse.pixel_size_m}/{fine.pixel_size_m} is not an integer"
        )
    factor = int(ratio)
    if fine.height != coarse.height * factor or fine.width != coarse.width * factor:
        raise GeometryError(
            f"grid shapes {fine.values.shape} / {coarse.values.shape} do not match "
            f"a x{factor} resolution ratio"
        )
    reduced = _block_reduce(fine.values, fine.valid_mask, factor)
    pair = {fine.band: reduced, coarse.band: as_grid(coarse)}
    return pair[a.band], pair[b.band]


def round_half_away(x):
    """Round half away from zero, elementwise."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def compose_rgb(scene, stretch=None):
    """Build the true-colour composite from B4/B3/B2.

    Reflectance is linearly stretched and clipped to [lo, hi], scaled to
    0-255 with half-away-from-zero rounding. Pixels where any visible band
    is nodata render black.
    """
    stretch = stretch or StretchSpec()
    grids = []
    for name in ("B4", "B3", "B2"):
        band = scene.band(name)
        grids.append(to_reflectance(band))
    shapes = {g.values.shape for g in grids}
    if len(shapes) > 1:
        raise GeometryError(f"visible bands disagree on grid shape: {sorted(shapes)}")

    h, w = grids[0].values.shape
    all_valid = grids[0].valid & grids[1].valid & grids[2].valid
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    for ch, grid in enumerate(grids):
        if stretch.mode == "percentile":
            vals = grid.values[all_valid]
            if vals.size == 0:
                lo, hi = 0.0, 1.0
            else:
                lo, hi = np.percentile(vals, stretch.percentiles)
                if hi <= lo:
                    hi = lo + 1e-9
        else:
            lo, hi = stretch.lo, stretch.hi
        t = np.clip((grid.values - lo) / (hi - lo), 0.0, 1.0)
        rgb[:, :, ch] = round_half_away(t * 255.0).astype(np.uint8)
    rgb[~all_valid] = 0
    return CompositeImage(width=w, height=h, rgb=rgb)


JPEG_QUALITY = 90
JPEG_SUBSAMPLING = 0  # 4:4:4; avoids chroma artifacts on sharp class edges


def encode_jpeg_bytes(img):
    if img.width == 0 or img.height == 0:
        raise InputError("cannot encode an empty composite")
    buf = io.BytesIO()
    Image.fromarray(img.rgb, "RGB").save(
        buf, format="JPEG", quality=JPEG_QUALITY, subsampling=JPEG_SUBSAMPLING
    )
    return buf.getvalue()


def export_jpeg(img, path):
    """Write the composite as a baseline JPEG (quality 90, 4:4:4)."""
    data = encode_jpeg_bytes(img)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def export_png(img, path):
    """Lossless sibling of export_jpeg, for debugging composites."""
    if img.width == 0 or img.height == 0:
        raise InputError("cannot encode an empty composite")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img.rgb, "RGB").save(path, format="PNG")
    return path


def composite_filename(period):
    """Six-monthly composites are named for the first day of their window."""
    return f"sentinel_{period.label}-01.jpg"
