"""Pixel-level spectral indices and their scene-level aggregation.

NDBI = (SWIR - NIR) / (SWIR + NIR), with SWIR = band B11 and NIR = band B8.
The image-level score is the arithmetic mean over valid pixels only:
counting masked pixels as zero would drag cloudy scenes toward zero, which
is precisely the artifact this baseline is criticised for. The ratio is
scale-invariant, so it is computed on raw digital numbers; converting to
reflectance first would only invite double-scaling bugs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .catalog import query_scenes, select_representative
from .errors import AuiError, NoValidPixelsError
from .raster import harmonize, read_scene

logger = logging.getLogger(__name__)


@dataclass
class IndexResult:
    """Per-pixel index grid plus its scene-level aggregate."""

    index_name: str
    values: np.ndarray  # float64, in [-1, 1] where valid
    valid: np.ndarray  # bool
    scene_mean: float
    valid_pixel_count: int


def ndbi(scene):
    """NDBI over one scene, on B8/B11 harmonized to the coarser (20 m) grid.

    Pixels where either band is nodata, or where SWIR + NIR = 0, are
    invalid. Raises NoValidPixelsError when nothing remains to average.
    """
    swir_band = scene.band("B11")
    nir_band = scene.band("B8")
    swir, nir = harmonize(swir_band, nir_band)

    total = swir.values + nir.values
    valid = swir.valid & nir.valid & (total != 0)
    values = np.zeros_like(total)
    np.divide(swir.values - nir.values, total, out=values, where=valid)
    count = int(valid.sum())
    if count == 0:
        raise NoValidPixelsError(
            f"scene {scene.scene_id}: NDBI mean undefined (no valid pixels)"
        )
    mean = float(values[valid].mean())
    return IndexResult(
        index_name="NDBI",
        values=values,
        valid=valid,
        scene_mean=mean,
        valid_pixel_count=count,
    )


@dataclass
class IndexSeriesEntry:
    period: object  # catalog.Period
    result: IndexResult
    scene: object  # catalog.SceneRecord


@dataclass
class IndexSeries:
    """Ordered per-period index results for one cell, with gaps kept explicit."""

    cell_code: str
    entries: list
    gaps: list  # periods with no scene
    failures: list  # (period, reason) rows that could not be computed


def index_series(cell, periods, source, *, compute=ndbi):
    """One index observation per non-gap period, in chronological order.

    Periods without any scene become gaps; scenes that cannot be processed
    (for example missing index bands) are flagged and skipped without
    aborting the series.
    """
    entries = []
    gaps = []
    failures = []
    for period in sorted(periods):
        scenes = query_scenes(source, cell, period)
        if not scenes:
            gaps.append(period)
            continue
        scene = select_representative(scenes, cell=cell, period=period)
        try:
            raster = read_scene(
                scene.band_assets, ("B8", "B11"), scene_id=scene.scene_id, cell=cell
            )
            result = compute(raster)
        except AuiError as exc:
            logger.warning("index failed for %s %s: %s", cell.code, period.label, exc)
            failures.append((period, str(exc)))
            continue
        entries.append(IndexSeriesEntry(period=period, result=result, scene=scene))
    return IndexSeries(cell_code=cell.code, entries=entries, gaps=gaps, failures=failures)
