"""Scene discovery and representative (least-cloud) selection.

Time is discretised into half-year periods covering only the first and
third calendar quarters; the second and fourth quarters are skipped so each
period yields one representative image with a seasonal buffer in between.

Two catalog source kinds are supported: a local directory with a
``manifest.json`` (the same format the ingest cache and the synthetic
corpus writer produce) and a remote HTTP search endpoint with bbox+datetime
parameters and paged JSON responses in the STAC shape.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, replace
from datetime import date, datetime, timezone
from pathlib import Path
from urllib.parse import urljoin

import requests

from .errors import (
    InputError,
    NoSceneError,
    NoValidPixelsError,
    ParseError,
    TransportError,
)
from .raster import canonical_band, read_scene, to_reflectance

logger = logging.getLogger(__name__)

#: Bands every pipeline stage downstream of ingest relies on.
REQUIRED_BANDS = ("B2", "B3", "B4", "B8", "B11")

CATALOG_TOKEN_ENV = "AUI_CATALOG_TOKEN"

#: Reflectance above which a B2 pixel is counted as cloud by the fallback
#: estimator (used when a local scene lacks cloud metadata).
CLOUD_BRIGHTNESS_THRESHOLD = 0.25

HTTP_RETRIES = 3
HTTP_BACKOFF_S = 0.5
HTTP_TIMEOUT_S = 30
_PAGE_LIMIT = 1000  # guard against pathological pagination loops

_inflight = threading.BoundedSemaphore(4)


def configure_request_limit(n):
    """Cap the number of concurrent remote catalog requests."""
    global _inflight
    if n < 1:
        raise InputError("request limit must be >= 1")
    _inflight = threading.BoundedSemaphore(n)


@dataclass(frozen=True, order=True)
class Period:
    """A half-year observation window: H1 = Jan-Mar, H2 = Jul-Sep."""

    year: int
    half: str  # "H1" | "H2"

    def __post_init__(self):
        if self.half not in ("H1", "H2"):
            raise InputError(f"half must be 'H1' or 'H2', got {self.half!r}")
        if not (1900 <= self.year <= 2200):
            raise InputError(f"implausible year {self.year}")

    @property
    def label(self):
        return f"{self.year}-01" if self.half == "H1" else f"{self.year}-07"

    @property
    def window(self):
        if self.half == "H1":
            return (date(self.year, 1, 1), date(self.year, 3, 31))
        return (date(self.year, 7, 1), date(self.year, 9, 30))

    def contains(self, ts):
        d = ts.date() if isinstance(ts, datetime) else ts
        start, end = self.window
        return start <= d <= end

    def next(self):
        if self.half == "H1":
            return Period(self.year, "H2")
        return Period(self.year + 1, "H1")

    @classmethod
    def from_label(cls, label):
        parts = str(label).split("-")
        if len(parts) != 2 or parts[1] not in ("01", "07") or not parts[0].isdigit():
            raise ParseError(
                f"period label {label!r} must look like 'YYYY-01' or 'YYYY-07'"
            )
        return cls(int(parts[0]), "H1" if parts[1] == "01" else "H2")

    @classmethod
    def range_inclusive(cls, first, last):
        """All periods from ``first`` to ``last``, chronological, inclusive."""
        if isinstance(first, str):
            first = cls.from_label(first)
        if isinstance(last, str):
            last = cls.from_label(last)
        if last < first:
            raise InputError(f"period range {first.label}..{last.label} is reversed")
        out = [first]
        while out[-1] < last:
            out.append(out[-1].next())
        return out


def parse_timestamp(text):
    """ISO-8601 timestamp to an aware UTC datetime; naive input is taken as UTC."""
    try:
        dt = datetime.fromisoformat(str(text).replace("Z", "+00:00"))
    except ValueError:
        raise ParseError(f"unparseable timestamp {text!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


@dataclass(frozen=True)
class SceneRecord:
    """One catalog entry for a cell: when it was taken, how cloudy, and where
    each band's pixels live. ``cloud_cover_pct`` may be None for local scenes
    that lack metadata; resolve it with estimate_cloud_fraction before
    selection."""

    scene_id: str
    acquired_at: datetime
    cloud_cover_pct: float | None
    band_assets: dict
    cell: object  # GeohashCell

    def __post_init__(self):
        if self.cloud_cover_pct is not None and not (0.0 <= self.cloud_cover_pct <= 100.0):
            raise InputError(
                f"scene {self.scene_id}: cloud cover {self.cloud_cover_pct} outside [0, 100]"
            )
        missing = [b for b in REQUIRED_BANDS if b not in self.band_assets]
        if missing:
            raise InputError(f"scene {self.scene_id}: missing required bands {missing}")


@dataclass(frozen=True)
class CatalogSource:
    """Where scenes come from: a local manifest directory or a search URL."""

    kind: str  # "local" | "remote"
    endpoint_or_root: str
    auth: str | None = None  # literal token; env var AUI_CATALOG_TOKEN otherwise

    def __post_init__(self):
        if self.kind not in ("local", "remote"):
            raise InputError(f"catalog source kind must be local or remote, got {self.kind!r}")

    @classmethod
    def local(cls, root):
        return cls(kind="local", endpoint_or_root=str(root))

    @classmethod
    def remote(cls, endpoint, auth=None):
        return cls(kind="remote", endpoint_or_root=str(endpoint), auth=auth)


def load_manifest(root):
    """Read and validate a local catalog manifest (one JSON document)."""
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise ParseError(f"local catalog {root} has no readable manifest.json")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("scenes"), list):
        raise ParseError(f"manifest {path} must be an object with a 'scenes' list")
    return doc["scenes"]


def _scene_from_manifest(entry, root, cell):
    try:
        bands = {canonical_band(k): v for k, v in entry["bands"].items()}
        resolved = {}
        for name, ref in bands.items():
            if isinstance(ref, dict):
                ref = dict(ref, path=str(Path(root) / ref["path"]))
            else:
                ref = str(Path(root) / ref)
            resolved[name] = ref
        return SceneRecord(
            scene_id=str(entry["scene_id"]),
            acquired_at=parse_timestamp(entry["acquired_at"]),
            cloud_cover_pct=(
                float(entry["cloud_cover_pct"])
                if entry.get("cloud_cover_pct") is not None
                else None
            ),
            band_assets=resolved,
            cell=cell,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed manifest scene entry {entry!r}: {exc}") from exc


def _query_local(source, cell, period):
    scenes = []
    root = Path(source.endpoint_or_root)
    for entry in load_manifest(root):
        if not isinstance(entry, dict):
            raise ParseError(f"manifest scene entry is not an object: {entry!r}")
        if entry.get("cell") != cell.code:
            continue
        record = _scene_from_manifest(entry, root, cell)
        if not period.contains(record.acquired_at):
            continue
        scenes.append(record)
    scenes.sort(key=lambda s: (s.acquired_at, s.scene_id))
    return scenes


_thread_state = threading.local()


def _session():
    if not hasattr(_thread_state, "session"):
        _thread_state.session = requests.Session()
    return _thread_state.session


def _http_get_json(url, params=None, headers=None):
    last_status = None
    for attempt in range(HTTP_RETRIES):
        try:
            with _inflight:
                resp = _session().get(
                    url, params=params, headers=headers, timeout=HTTP_TIMEOUT_S
                )
            last_status = resp.status_code
            if resp.status_code == 429 or resp.status_code >= 500:
                raise requests.RequestException(f"status {resp.status_code}")
            if resp.status_code >= 400:
                raise TransportError(
                    f"catalog request {url} rejected with {resp.status_code}",
                    attempts=attempt + 1,
                    last_status=resp.status_code,
                )
            try:
                return resp.json()
            except ValueError as exc:
                raise ParseError(f"catalog response from {url} is not JSON: {exc}") from exc
        except requests.RequestException as exc:
            logger.warning("catalog request failed (attempt %d/%d): %s", attempt + 1, HTTP_RETRIES, exc)
            if attempt + 1 < HTTP_RETRIES:
                time.sleep(HTTP_BACKOFF_S * (2 ** attempt))
    raise TransportError(
        f"catalog request {url} failed after {HTTP_RETRIES} attempts",
        attempts=HTTP_RETRIES,
        last_status=last_status,
    )


def _feature_to_scene(feature, cell):
    props = feature.get("properties", {})
    ts = props.get("datetime")
    cloud = props.get("eo:cloud_cover", props.get("cloud_cover"))
    if ts is None or cloud is None:
        logger.warning("skipping catalog feature %r: missing datetime or cloud cover",
                       feature.get("id"))
        return None
    fb = feature.get("bbox")
    if fb is not None:
        lon_min, lat_min, lon_max, lat_max = (float(v) for v in fb[:4])
        covers = (
            lon_min <= cell.lon_min and lat_min <= cell.lat_min
            and lon_max >= cell.lon_max and lat_max >= cell.lat_max
        )
        if not covers:
            return None
    assets = {}
    for key, asset in (feature.get("assets") or {}).items():
        try:
            name = canonical_band(key)
        except InputError:
            continue
        href = asset.get("href") if isinstance(asset, dict) else asset
        if href:
            assets[name] = str(href)
    if any(b not in assets for b in REQUIRED_BANDS):
        logger.warning("skipping catalog feature %r: incomplete band assets",
                       feature.get("id"))
        return None
    return SceneRecord(
        scene_id=str(feature.get("id", "")),
        acquired_at=parse_timestamp(ts),
        cloud_cover_pct=float(cloud),
        band_assets=assets,
        cell=cell,
    )


def _query_remote(source, cell, period):
    start, end = period.window
    params = {
        "bbox": f"{cell.lon_min},{cell.lat_min},{cell.lon_max},{cell.lat_max}",
        "datetime": f"{start.isoformat()}T00:00:00Z/{end.isoformat()}T23:59:59Z",
        "limit": 100,
    }
    headers = {}
    token = source.auth or os.environ.get(CATALOG_TOKEN_ENV)
    if token:
        headers["Authorization"] = f"Bearer {token}"

    scenes = []
    url = source.endpoint_or_root
    for page in range(_PAGE_LIMIT):
        doc = _http_get_json(url, params=params if page == 0 else None, headers=headers)
        features = doc.get("features")
        if not isinstance(features, list):
            raise ParseError(f"catalog page from {url} has no 'features' list")
        for feature in features:
            record = _feature_to_scene(feature, cell)
            if record is not None and period.contains(record.acquired_at):
                scenes.append(record)
        next_url = None
        for link in doc.get("links", []) or []:
            if isinstance(link, dict) and link.get("rel") == "next" and link.get("href"):
                next_url = urljoin(url, link["href"])
                break
        if next_url is None:
            break
        url = next_url
    else:
        raise ParseError("catalog pagination did not terminate")
    scenes.sort(key=lambda s: (s.acquired_at, s.scene_id))
    return scenes


def query_scenes(source, cell, period):
    """All candidate scenes for a cell within one period window.

    Every returned scene's timestamp lies inside the window and its
    footprint covers the cell bbox; the list may be empty (a gap).
    """
    if source.kind == "local":
        return _query_local(source, cell, period)
    return _query_remote(source, cell, period)


def select_representative(scenes, *, cell=None, period=None):
    """Pick the least-cloud scene; ties go to the earliest acquisition, then
    the lexicographically smallest scene id, so selection is deterministic
    under any input permutation."""
    if not scenes:
        raise NoSceneError(
            cell_code=cell.code if cell is not None else None,
            period_label=period.label if period is not None else None,
        )
    codes = {s.cell.code for s in scenes}
    if len(codes) > 1:
        raise InputError(f"scenes span multiple cells: {sorted(codes)}")
    if any(s.cloud_cover_pct is None for s in scenes):
        raise InputError(
            "cloud cover metadata unresolved; estimate it before selection"
        )
    return min(scenes, key=lambda s: (s.cloud_cover_pct, s.acquired_at, s.scene_id))


def fetch_asset(url, *, auth=None):
    """Download one asset (band file) with the same retry policy as search."""
    headers = {}
    token = auth or os.environ.get(CATALOG_TOKEN_ENV)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    last_status = None
    for attempt in range(HTTP_RETRIES):
        try:
            with _inflight:
                resp = _session().get(url, headers=headers, timeout=HTTP_TIMEOUT_S)
            last_status = resp.status_code
            if resp.status_code == 429 or resp.status_code >= 500:
                raise requests.RequestException(f"status {resp.status_code}")
            if resp.status_code >= 400:
                raise TransportError(
                    f"asset download {url} rejected with {resp.status_code}",
                    attempts=attempt + 1,
                    last_status=resp.status_code,
                )
            return resp.content
        except requests.RequestException as exc:
            logger.warning(
                "asset download failed (attempt %d/%d): %s", attempt + 1, HTTP_RETRIES, exc
            )
            if attempt + 1 < HTTP_RETRIES:
                time.sleep(HTTP_BACKOFF_S * (2 ** attempt))
    raise TransportError(
        f"asset download {url} failed after {HTTP_RETRIES} attempts",
        attempts=HTTP_RETRIES,
        last_status=last_status,
    )


def resolve_cloud_cover(scenes):
    """Fill missing cloud metadata by estimating from the B2 band.

    Local scenes may lack catalog cloud cover; the estimate reads their B2
    asset and applies the brightness-threshold fraction.
    """
    out = []
    for scene in scenes:
        if scene.cloud_cover_pct is not None:
            out.append(scene)
            continue
        raster = read_scene(scene.band_assets, ("B2",), scene_id=scene.scene_id, cell=scene.cell)
        fraction = estimate_cloud_fraction(raster)
        out.append(replace(scene, cloud_cover_pct=round(fraction * 100.0, 2)))
    return out


def estimate_cloud_fraction(scene_raster, threshold=CLOUD_BRIGHTNESS_THRESHOLD):
    """Fallback cloud estimate: fraction of valid B2 pixels brighter than the
    threshold reflectance. Raises NoValidPixelsError when every pixel is
    nodata (the fraction is undefined, not zero)."""
    band = scene_raster.band("B2")
    refl = to_reflectance(band)
    if refl.valid_count == 0:
        raise NoValidPixelsError(
            f"scene {scene_raster.scene_id}: no valid B2 pixels to estimate clouds from"
        )
    return float((refl.valid_values() > threshold).mean())
