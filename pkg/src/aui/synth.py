"""Synthetic urbanization scenes: the desk-scale stand-in for real imagery.

Land is split into built-up, vegetation, and bare classes with Gaussian
band distributions chosen so the spectral contrast that matters downstream
holds by construction: built-up has SWIR above NIR, vegetation is the exact
mirror (NIR above SWIR), and clouds are bright everywhere in the visible
while depressing SWIR relative to NIR. The parameters make index
expectations analytically predictable, e.g. a pure built-up scene has
NDBI around (3000 - 2200) / (3000 + 2200) = 0.154.

The class map is drawn at the 20 m grid and replicated 2x2 onto the 10 m
grid, so block-mean harmonization sees class-pure blocks. Clouds are one
connected blob with an exact pixel count, overriding the land signal.

Also provided: a corpus writer that emits scene TIFFs plus a catalog
manifest (so end-to-end tests exercise the real ingestion path), a
synthetic reference-image set, and the deterministic stub backend used in
place of a remote model for pipeline tests. Stub scores are a fixed
monotone map of an image statistic; they are never urban-development
ground truth.
"""

from __future__ import annotations

import io
import json
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError
from .raster import BandRaster, SceneRaster, compose_rgb, encode_jpeg_bytes
from .scoring import (
    CANONICAL_REFERENCE_BINS,
    ImageAttachment,
    ImagePart,
    ModelBackend,
    ReferenceEntry,
    ReferenceSet,
    round_to_tenth,
)
from .tiff import write_tiff

logger = logging.getLogger(__name__)

CLASS_BARE, CLASS_BUILT, CLASS_VEG = 0, 1, 2

#: DN (mean, sd) per band and surface class. Vegetation mirrors built-up in
#: the B8/B11 pair; cloud B2 sits far above the 0.25-reflectance detection
#: threshold while land classes stay safely below it.
BAND_PARAMS = {
    "B2": {CLASS_BARE: (1600, 80), CLASS_BUILT: (2200, 90), CLASS_VEG: (600, 60), "cloud": (6000, 300)},
    "B3": {CLASS_BARE: (1950, 80), CLASS_BUILT: (2300, 90), CLASS_VEG: (1600, 90), "cloud": (6000, 300)},
    "B4": {CLASS_BARE: (2300, 80), CLASS_BUILT: (2350, 90), CLASS_VEG: (800, 70), "cloud": (6000, 300)},
    "B8": {CLASS_BARE: (2500, 150), CLASS_BUILT: (2200, 150), CLASS_VEG: (3000, 150), "cloud": (6800, 300)},
    "B11": {CLASS_BARE: (2600, 150), CLASS_BUILT: (3000, 150), CLASS_VEG: (2200, 150), "cloud": (4800, 300)},
}

FINE_BANDS = ("B2", "B3", "B4", "B8")  # 10 m
COARSE_BANDS = ("B11",)  # 20 m


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one scene; fully deterministic given the seed."""

    built_up_fraction: float
    vegetation_fraction: float
    cloud_fraction: float = 0.0
    seed: int = 0
    size: int = 64  # fine-grid (10 m) pixels per side; must be even

    def __post_init__(self):
        for name in ("built_up_fraction", "vegetation_fraction", "cloud_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InputError(f"{name}={v} outside [0, 1]")
        if self.built_up_fraction + self.vegetation_fraction > 1.0 + 1e-12:
            raise InputError("built_up_fraction + vegetation_fraction exceeds 1")
        if self.size < 2 or self.size % 2:
            raise InputError("size must be an even number >= 2")


@dataclass
class SynthTruth:
    """Ground truth the generator knows: per-pixel class and cloud masks on
    the 20 m grid (fine-grid versions are 2x2 replications)."""

    class_coarse: np.ndarray  # int8 codes
    cloud_coarse: np.ndarray  # bool

    @property
    def class_fine(self):
        return np.kron(self.class_coarse, np.ones((2, 2), dtype=np.int8))

    @property
    def cloud_fine(self):
        return np.kron(self.cloud_coarse, np.ones((2, 2), dtype=bool))

    @property
    def cloud_fraction(self):
        return float(self.cloud_coarse.mean())

    def land_fraction(self, code):
        return float((self.class_coarse == code).mean())


def _blob_mask(rng, n, count):
    """A connected random blob with exactly ``count`` cells on an n x n grid."""
    mask = np.zeros((n, n), dtype=bool)
    count = min(int(count), n * n)
    if count <= 0:
        return mask
    start = (int(rng.integers(n)), int(rng.integers(n)))
    frontier = [start]
    seen = {start}
    taken = 0
    while frontier and taken < count:
        idx = int(rng.integers(len(frontier)))
        frontier[idx], frontier[-1] = frontier[-1], frontier[idx]
        y, x = frontier.pop()
        mask[y, x] = True
        taken += 1
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < n and 0 <= nx < n and (ny, nx) not in seen:
                seen.add((ny, nx))
                frontier.append((ny, nx))
    return mask


def _band_field(rng, shape, class_grid, cloud_grid, band):
    params = BAND_PARAMS[band]
    out = np.zeros(shape, dtype=np.float64)
    for code in (CLASS_BARE, CLASS_BUILT, CLASS_VEG):
        sel = (class_grid == code) & ~cloud_grid
        mu, sd = params[code]
        out[sel] = rng.normal(mu, sd, int(sel.sum()))
    mu, sd = params["cloud"]
    out[cloud_grid] = rng.normal(mu, sd, int(cloud_grid.sum()))
    # DN 0 is nodata, so keep draws strictly positive.
    return np.clip(np.rint(out), 1, 65535).astype(np.uint16)


def generate(spec, *, cell=None, scene_id="synthetic"):
    """Build one synthetic SceneRaster plus its ground-truth masks."""
    rng = np.random.default_rng(spec.seed)
    n = spec.size // 2
    total = n * n

    k_built = int(round(spec.built_up_fraction * total))
    k_veg = min(int(round(spec.vegetation_fraction * total)), total - k_built)
    order = rng.permutation(total)
    classes = np.full(total, CLASS_BARE, dtype=np.int8)
    classes[order[:k_built]] = CLASS_BUILT
    classes[order[k_built : k_built + k_veg]] = CLASS_VEG
    class_coarse = classes.reshape(n, n)

    cloud_coarse = _blob_mask(rng, n, round(spec.cloud_fraction * total))
    truth = SynthTruth(class_coarse=class_coarse, cloud_coarse=cloud_coarse)

    class_fine = truth.class_fine
    cloud_fine = truth.cloud_fine
    bands = {}
    for band in FINE_BANDS:
        values = _band_field(rng, (spec.size, spec.size), class_fine, cloud_fine, band)
        bands[band] = BandRaster(
            band=band, width=spec.size, height=spec.size,
            pixel_size_m=10, values=values,
        )
    for band in COARSE_BANDS:
        values = _band_field(rng, (n, n), class_coarse, cloud_coarse, band)
        bands[band] = BandRaster(
            band=band, width=n, height=n, pixel_size_m=20, values=values,
        )
    scene = SceneRaster(bands=bands, scene_id=scene_id, cell=cell)
    return scene, truth


# -- corpus / fixture writers ------------------------------------------------

#: TIFF encodings cycled across corpus scenes so end-to-end runs exercise
#: the full supported read matrix.
_TIFF_VARIANTS = (
    {"byte_order": "<", "layout": "strip", "compression": "none"},
    {"byte_order": ">", "layout": "strip", "compression": "deflate"},
    {"byte_order": "<", "layout": "tile", "compression": "deflate"},
    {"byte_order": ">", "layout": "tile", "compression": "none"},
)


def _stable_seed(base_seed, cell_code, label):
    return (int(base_seed) * 1000003 + zlib.crc32(f"{cell_code}:{label}".encode())) % (2**31)


def write_scene_tiffs(scene, directory, *, variant=0):
    """Write each band of a scene as its own TIFF; returns band->relpath."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    options = _TIFF_VARIANTS[variant % len(_TIFF_VARIANTS)]
    paths = {}
    for name, band in scene.bands.items():
        out = directory / f"{name}.tif"
        write_tiff(out, band.values, nodata=band.nodata_value, **options)
        paths[name] = out
    return paths


def default_spec_builder(base_seed=0, *, built_range=(0.2, 0.7), cloud_periods=(), cloud_fraction=0.4, size=64):
    """Scene recipes for a corpus: a built-up ramp with optional cloud
    injections at the given 1-based period positions."""
    lo, hi = built_range

    def build(cell_code, period, index, count):
        frac = lo if count <= 1 else lo + (hi - lo) * index / (count - 1)
        cloud = cloud_fraction if (index + 1) in cloud_periods else 0.0
        return SynthSpec(
            built_up_fraction=frac,
            vegetation_fraction=1.0 - frac,
            cloud_fraction=cloud,
            seed=_stable_seed(base_seed, cell_code, period.label),
            size=size,
        )

    return build


def write_corpus(root, cell_codes, periods, *, spec_builder=None, base_seed=0):
    """Materialise a local catalog: scene TIFFs plus manifest.json.

    The manifest is the same format the ingest cache uses, so everything
    downstream consumes this corpus through the ordinary local source path.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if spec_builder is None:
        spec_builder = default_spec_builder(base_seed)
    periods = sorted(periods)
    entries = []
    for cell_code in cell_codes:
        for index, period in enumerate(periods):
            spec = spec_builder(cell_code, period, index, len(periods))
            scene_id = f"S2_{cell_code}_{period.label}"
            scene, truth = generate(spec, scene_id=scene_id)
            rel = Path("scenes") / cell_code / period.label
            paths = write_scene_tiffs(
                scene, root / rel, variant=index + len(entries)
            )
            month = "02" if period.half == "H1" else "08"
            entries.append(
                {
                    "scene_id": scene_id,
                    "cell": cell_code,
                    "acquired_at": f"{period.year}-{month}-10T10:00:00Z",
                    "cloud_cover_pct": round(truth.cloud_fraction * 100.0, 2),
                    "period": period.label,
                    "bands": {
                        name: str(Path(rel) / path.name) for name, path in paths.items()
                    },
                }
            )
    manifest = {"schema_version": 1, "scenes": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root


#: Built-up fractions used for the six synthetic reference images, matched
#: to the canonical score bins from low to high.
REFERENCE_BUILT_FRACTIONS = (0.02, 0.15, 0.35, 0.55, 0.75, 0.95)


def default_reference_set(seed=0, size=64):
    """Synthetic reference images over the canonical bins, in memory."""
    entries = []
    for i, ((label, lo, hi, note), frac) in enumerate(
        zip(CANONICAL_REFERENCE_BINS, REFERENCE_BUILT_FRACTIONS)
    ):
        spec = SynthSpec(
            built_up_fraction=frac,
            vegetation_fraction=1.0 - frac,
            seed=seed * 101 + i,
            size=size,
        )
        scene, _ = generate(spec, scene_id=f"ref-{i}")
        image = ImageAttachment(jpeg=encode_jpeg_bytes(compose_rgb(scene)))
        entries.append(
            ReferenceEntry(
                label=f"synthetic stand-in for {label}",
                lo=lo,
                hi=hi,
                image=image,
                note=f"synthetic; modelled on {note}",
            )
        )
    return ReferenceSet(entries=tuple(entries))


def write_reference_set(directory, *, seed=0, size=64):
    """Write the synthetic reference set as JPEGs plus references.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    refs = default_reference_set(seed=seed, size=size)
    doc = {"entries": []}
    for i, entry in enumerate(refs.entries):
        name = f"ref_{i}.jpg"
        (directory / name).write_bytes(entry.image.jpeg)
        doc["entries"].append(
            {
                "label": entry.label,
                "aui_range": [entry.lo, entry.hi],
                "image": name,
                "note": entry.note,
            }
        )
    path = directory / "references.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


# -- deterministic stub backend ----------------------------------------------

CLOUD_MIN_CHANNEL = 240  # near-white in every channel
VEG_GREEN_MARGIN = 12  # green exceeds red by this many byte levels
BUILT_SPREAD_MAX = 32  # grey built-up pixels have nearly equal channels

#: Fixed monotone map from the built-up statistic into [0, 10].
STUB_SCORE_SLOPE = 2.0


def classify_composite(rgb):
    """Per-pixel class codes from an RGB composite: 3 cloud, 2 vegetation,
    1 built-up, 0 other."""
    channels = rgb.astype(np.int16)
    r, g, b = channels[:, :, 0], channels[:, :, 1], channels[:, :, 2]
    lo = np.minimum(np.minimum(r, g), b)
    hi = np.maximum(np.maximum(r, g), b)
    codes = np.zeros(r.shape, dtype=np.int8)
    cloud = lo >= CLOUD_MIN_CHANNEL
    veg = ~cloud & (g - r >= VEG_GREEN_MARGIN)
    built = ~cloud & ~veg & (hi - lo <= BUILT_SPREAD_MAX)
    codes[built] = 1
    codes[veg] = 2
    codes[cloud] = 3
    return codes


def builtup_statistic(current_jpeg, previous_jpeg=None):
    """Fraction of non-cloud pixels classified built-up.

    Cloud-covered pixels carry no land signal; when the previous period's
    image is available and matches in shape, their class is read from that
    image instead of being dropped, which is what keeps the statistic
    steady through a cloudy period.
    """
    current = np.asarray(Image.open(io.BytesIO(current_jpeg)).convert("RGB"))
    codes = classify_composite(current)
    counted = codes != 3
    built = int((codes == 1).sum())
    total = int(counted.sum())
    if previous_jpeg is not None:
        previous = np.asarray(Image.open(io.BytesIO(previous_jpeg)).convert("RGB"))
        if previous.shape == current.shape:
            prev_codes = classify_composite(previous)
            fallback = (codes == 3) & (prev_codes != 3)
            built += int((prev_codes[fallback] == 1).sum())
            total += int(fallback.sum())
    if total == 0:
        return 0.0
    return built / total


class StubScoreBackend(ModelBackend):
    """Deterministic backend for pipeline tests.

    The score is STUB_SCORE_SLOPE times the built-up statistic of the
    current image, rounded to one decimal. The previous period's *image*
    feeds the statistic's cloud fallback; the previous *score* in the
    prompt is ignored (per-step clamping, when wanted, is the scoring
    engine's opt-in clamp, not the stub's job).
    """

    kind = "deterministic_stub"
    model_id = "stub-builtup-v1"

    def complete(self, payload):
        current = None
        previous = None
        for part in payload.parts:
            if isinstance(part, ImagePart):
                if part.role == "current":
                    current = part.jpeg
                elif part.role == "previous":
                    previous = part.jpeg
        if current is None:
            raise InputError("payload carries no current image")
        stat = builtup_statistic(current, previous)
        value = round_to_tenth(STUB_SCORE_SLOPE * stat)
        return json.dumps(
            {
                "aui": value,
                "rationale": f"built-up statistic {stat:.4f} mapped with slope {STUB_SCORE_SLOPE}",
            }
        )


def stub_backend():
    """The deterministic stub used for pipeline tests; never ground truth."""
    return StubScoreBackend()
