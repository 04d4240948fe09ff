"""The AUI scoring engine.

A score request carries three kinds of context, assembled into one
deterministic prompt payload: a curated reference set of images with known
score ranges (spatial calibration), the same region's previous image with
its assigned score (temporal anchoring), and the current image. A pluggable
backend turns the payload into raw text; the response contract is a JSON
object with a numeric "aui" field and a "rationale" string, extracted
tolerantly from surrounding prose or code fences.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import requests

from .catalog import query_scenes, select_representative
from .errors import (
    BackendError,
    ConfigError,
    InputError,
    ScoringError,
)
from .raster import compose_rgb, composite_filename, encode_jpeg_bytes, read_scene
from .store import AuiObservation, AuiSeries, utc_now_iso

logger = logging.getLogger(__name__)

MODEL_API_KEY_ENV = "AUI_MODEL_API_KEY"

#: Re-asks after an unparseable response before giving up.
DEFAULT_PARSE_RETRIES = 2

# Rate limiter shared by all remote backends: scoring across cells may run
# concurrently, but in-flight model requests stay capped.
_inflight = threading.BoundedSemaphore(4)


def configure_request_limit(n):
    """Cap the number of concurrent remote model requests."""
    global _inflight
    if n < 1:
        raise InputError("request limit must be >= 1")
    _inflight = threading.BoundedSemaphore(n)

INSTRUCTION_TEXT = """\
You rate the urban development visible in a satellite image on the AUI scale
from 0 to 10, where 0 means fully natural land cover (forest, water, open
country) and 10 means dense, mature urban fabric with contiguous buildings
and road networks. Intermediate values track the share and maturity of
built-up area.

Reference images labelled with their AUI ranges follow; score relative to
them. If an image of the same region from the previous period is provided
together with its assigned AUI, stay consistent with that score unless the
imagery shows genuine construction or demolition; ignore differences that
are plausibly seasonal vegetation change, haze, or cloud.

Respond with exactly one JSON object of the form
{"aui": <number between 0 and 10 with one decimal>, "rationale": "<one or two sentences>"}
and no other text.\
"""


def round_to_tenth(value):
    """Round to one decimal, halves away from zero (7.35 -> 7.4)."""
    d = Decimal(repr(float(value))).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    return float(d)


@dataclass(frozen=True)
class ImageAttachment:
    """JPEG bytes attached to a prompt."""

    jpeg: bytes

    @classmethod
    def from_path(cls, path):
        return cls(jpeg=Path(path).read_bytes())

    @classmethod
    def from_composite(cls, composite):
        return cls(jpeg=encode_jpeg_bytes(composite))


#: The curated calibration regions and their score bins, ascending.
CANONICAL_REFERENCE_BINS = (
    ("Koothampalyam forest", 0.0, 0.0, "GH5 tdp49"),
    ("Jallipalya", 1.0, 2.0, "GH5 tdp54"),
    ("Hesaraghatta", 3.0, 4.0, "GH5 tdr4f"),
    ("Kaggalipura", 5.0, 6.0, "GH5 tdr0g"),
    ("Halasuru", 7.0, 8.0, "GH5 tdr1y"),
    ("Rajajinagar", 9.0, 10.0, "GH5 tdr1u"),
)


@dataclass(frozen=True)
class ReferenceEntry:
    label: str
    lo: float
    hi: float
    image: ImageAttachment
    note: str = ""

    def __post_init__(self):
        if not (0.0 <= self.lo <= self.hi <= 10.0):
            raise InputError(
                f"reference {self.label!r}: range [{self.lo}, {self.hi}] invalid"
            )

    @property
    def range_label(self):
        if self.lo == self.hi:
            return f"{self.lo:g}"
        return f"{self.lo:g}-{self.hi:g}"


@dataclass(frozen=True)
class ReferenceSet:
    """Ordered calibration images; ranges must ascend without overlap."""

    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        prev_hi = None
        for e in self.entries:
            if prev_hi is not None and e.lo <= prev_hi:
                raise InputError(
                    f"reference ranges must be ascending and non-overlapping; "
                    f"[{e.lo}, {e.hi}] follows hi={prev_hi}"
                )
            prev_hi = e.hi


def load_references(path):
    """Load a reference set from a JSON document; image paths are resolved
    relative to the document."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        raw_entries = doc["entries"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"unreadable reference set {path}: {exc}") from exc
    entries = []
    for raw in raw_entries:
        try:
            lo, hi = (float(v) for v in raw["aui_range"])
            image = ImageAttachment.from_path(path.parent / raw["image"])
            entries.append(
                ReferenceEntry(
                    label=str(raw["label"]),
                    lo=lo,
                    hi=hi,
                    image=image,
                    note=str(raw.get("note", "")),
                )
            )
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad reference entry {raw!r}: {exc}") from exc
    if not entries:
        raise ConfigError(f"reference set {path} has no entries")
    return ReferenceSet(entries=tuple(entries))


@dataclass(frozen=True)
class PreviousObservation:
    image: ImageAttachment
    aui: float

    def __post_init__(self):
        if not (0.0 <= self.aui <= 10.0):
            raise InputError(f"previous AUI {self.aui} outside [0, 10]")


@dataclass(frozen=True)
class ScoringRequest:
    cell: object  # GeohashCell
    period: object  # catalog.Period
    current_image: ImageAttachment
    references: ReferenceSet
    previous: PreviousObservation | None = None


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    role: str  # "reference" | "previous" | "current"
    caption: str
    jpeg: bytes


@dataclass(frozen=True)
class PromptPayload:
    """Ordered prompt parts; a pure function of the scoring request."""

    parts: tuple

    def digest(self):
        canon = []
        for p in self.parts:
            if isinstance(p, TextPart):
                canon.append({"type": "text", "text": p.text})
            else:
                canon.append(
                    {
                        "type": "image",
                        "role": p.role,
                        "caption": p.caption,
                        "jpeg_sha256": hashlib.sha256(p.jpeg).hexdigest(),
                    }
                )
        blob = json.dumps({"parts": canon}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def assemble_prompt(request):
    """Build the ordered payload: instruction, captioned references in
    ascending range order, the previous image with its score when present,
    then the current image captioned with its period label."""
    if not request.references.entries:
        raise ConfigError("scoring requires a non-empty reference set")
    parts = [TextPart(INSTRUCTION_TEXT)]
    for entry in request.references.entries:
        parts.append(
            ImagePart(
                role="reference",
                caption=f"Reference image: AUI range {entry.range_label}",
                jpeg=entry.image.jpeg,
            )
        )
    if request.previous is not None:
        parts.append(
            ImagePart(
                role="previous",
                caption=(
                    "Same region, previous period; "
                    f"assigned AUI = {request.previous.aui:.1f}"
                ),
                jpeg=request.previous.image.jpeg,
            )
        )
    parts.append(
        ImagePart(
            role="current",
            caption=f"Current image of the region, period {request.period.label}",
            jpeg=request.current_image.jpeg,
        )
    )
    return PromptPayload(parts=tuple(parts))


def extract_first_json_object(text):
    """First well-formed JSON object embedded anywhere in the text, or None.

    Tolerates surrounding prose and code fences by scanning for braces.
    """
    decoder = json.JSONDecoder()
    idx = text.find("{")
    while idx != -1:
        try:
            obj, _ = decoder.raw_decode(text[idx:])
        except json.JSONDecodeError:
            idx = text.find("{", idx + 1)
            continue
        if isinstance(obj, dict):
            return obj
        idx = text.find("{", idx + 1)
    return None


@dataclass(frozen=True)
class AuiScore:
    """A parsed, validated score with an audit digest of the raw response."""

    value: float
    rationale_text: str
    model_id: str
    raw_response_digest: str

    def __post_init__(self):
        if not (0.0 <= self.value <= 10.0):
            raise InputError(f"score {self.value} outside [0, 10]")


class ModelBackend:
    """Interface all backends implement: payload in, raw text out."""

    kind = "abstract"
    model_id = "unknown"

    def complete(self, payload):
        raise NotImplementedError


class ReplayCacheBackend(ModelBackend):
    """Content-addressed store of recorded responses, keyed by payload digest.

    The test-time backend: replaying recorded responses makes an entire run
    reproducible without any network access.
    """

    kind = "replay_cache"
    model_id = "replay"

    def __init__(self, cache_dir):
        self.cache_dir = Path(cache_dir)

    def _path(self, digest):
        return self.cache_dir / f"{digest}.json"

    def complete(self, payload):
        path = self._path(payload.digest())
        if not path.is_file():
            raise BackendError(
                f"replay cache {self.cache_dir} has no response for digest "
                f"{payload.digest()}"
            )
        try:
            doc = json.loads(path.read_text())
            return doc["response"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise BackendError(f"corrupt replay entry {path}: {exc}") from exc

    def store(self, payload, response_text, model_id="recorded"):
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        path = self._path(payload.digest())
        path.write_text(
            json.dumps({"response": response_text, "model_id": model_id}, indent=2)
        )
        return path


class RemoteModelBackend(ModelBackend):
    """HTTP backend speaking the chat-completions shape: JSON body with text
    parts and base64 JPEG image parts; sampling pinned for reproducibility
    (remote models may still vary, which is what the replay cache is for)."""

    kind = "remote_multimodal"

    def __init__(
        self,
        endpoint,
        model_id,
        *,
        api_key_env=MODEL_API_KEY_ENV,
        timeout_s=120,
        retries=3,
        backoff_s=0.5,
        record_dir=None,
    ):
        self.endpoint = endpoint
        self.model_id = model_id
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.retries = retries
        self.backoff_s = backoff_s
        self.recorder = ReplayCacheBackend(record_dir) if record_dir else None

    def _body(self, payload):
        content = []
        for part in payload.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                content.append({"type": "text", "text": part.caption})
                b64 = base64.b64encode(part.jpeg).decode("ascii")
                content.append(
                    {
                        "type": "image_url",
                        "image_url": {"url": f"data:image/jpeg;base64,{b64}"},
                    }
                )
        return {
            "model": self.model_id,
            "temperature": 0,
            "seed": 7,
            "messages": [{"role": "user", "content": content}],
        }

    def complete(self, payload):
        api_key = os.environ.get(self.api_key_env)
        if not api_key:
            raise ConfigError(
                f"remote backend requires the {self.api_key_env} environment variable"
            )
        headers = {
            "Authorization": f"Bearer {api_key}",
            "Content-Type": "application/json",
        }
        body = self._body(payload)
        last_exc = None
        for attempt in range(self.retries):
            try:
                with _inflight:
                    resp = requests.post(
                        self.endpoint, json=body, headers=headers, timeout=self.timeout_s
                    )
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise requests.RequestException(f"status {resp.status_code}")
                if resp.status_code >= 400:
                    raise BackendError(
                        f"model endpoint rejected request: {resp.status_code} {resp.text[:200]}"
                    )
                doc = resp.json()
                text = doc["choices"][0]["message"]["content"]
                if not isinstance(text, str):
                    raise BackendError("malformed completion envelope: content not text")
                if self.recorder is not None:
                    self.recorder.store(payload, text, model_id=self.model_id)
                return text
            except (requests.RequestException, ValueError, KeyError, IndexError) as exc:
                last_exc = exc
                logger.warning(
                    "model request failed (attempt %d/%d): %s",
                    attempt + 1, self.retries, exc,
                )
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff_s * (2 ** attempt))
        raise BackendError(
            f"model endpoint unreachable after {self.retries} attempts: {last_exc}"
        )


def score(request, backend, *, parse_retries=DEFAULT_PARSE_RETRIES):
    """Score one request: assemble the payload, call the backend, parse and
    validate. Unparseable responses are re-asked up to ``parse_retries``
    times; values outside [0, 10] are logged as anomalies and clamped, then
    rounded to one decimal (half away from zero)."""
    payload = assemble_prompt(request)
    raw = None
    for _attempt in range(parse_retries + 1):
        raw = backend.complete(payload)
        obj = extract_first_json_object(raw)
        if obj is None:
            continue
        value = obj.get("aui")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            continue
        value = float(value)
        if not (0.0 <= value <= 10.0):
            logger.warning(
                "model returned out-of-range aui %.3f for %s %s; clamping",
                value, request.cell.code, request.period.label,
            )
            value = min(10.0, max(0.0, value))
        return AuiScore(
            value=round_to_tenth(value),
            rationale_text=str(obj.get("rationale", "")),
            model_id=backend.model_id,
            raw_response_digest=hashlib.sha256(raw.encode("utf-8")).hexdigest(),
        )
    raise ScoringError(
        f"no parseable score after {parse_retries + 1} attempts",
        raw_text=raw,
        attempts=parse_retries + 1,
    )


def score_series(
    cell,
    periods,
    source,
    backend,
    references,
    *,
    stretch=None,
    clamp_step=None,
    parse_retries=DEFAULT_PARSE_RETRIES,
    store=None,
    composites_dir=None,
):
    """Score a cell across periods in chronological order.

    Each request after the first carries the most recent prior non-gap
    image and score as its temporal anchor; periods with no scene are
    recorded as gaps and skipped in the anchoring. The optional
    ``clamp_step`` bounds per-step change after scoring (disabled by
    default: anchoring normally happens in the prompt, not post hoc). A
    backend failure aborts the series; observations already appended to
    ``store`` remain persisted.
    """
    observations = []
    gaps = []
    previous = None
    for period in sorted(periods):
        scenes = query_scenes(source, cell, period)
        if not scenes:
            gaps.append(period.label)
            if store is not None:
                store.record_gap(cell.code, period.label)
            continue
        scene = select_representative(scenes, cell=cell, period=period)
        raster = read_scene(
            scene.band_assets, ("B2", "B3", "B4"), scene_id=scene.scene_id, cell=cell
        )
        composite = compose_rgb(raster, stretch=stretch)
        attachment = ImageAttachment.from_composite(composite)
        if composites_dir is not None:
            out = Path(composites_dir) / cell.code / composite_filename(period)
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_bytes(attachment.jpeg)

        request = ScoringRequest(
            cell=cell,
            period=period,
            current_image=attachment,
            references=references,
            previous=previous,
        )
        result = score(request, backend, parse_retries=parse_retries)
        value = result.value
        if clamp_step is not None and previous is not None:
            lo, hi = previous.aui - clamp_step, previous.aui + clamp_step
            clamped = min(max(value, lo), hi)
            if clamped != value:
                logger.info(
                    "clamped %s %s score %.1f to %.1f (step limit %.1f)",
                    cell.code, period.label, value, clamped, clamp_step,
                )
            value = round_to_tenth(min(10.0, max(0.0, clamped)))

        obs = AuiObservation(
            cell_code=cell.code,
            period_label=period.label,
            aui=value,
            scene_id=scene.scene_id,
            cloud_cover_pct=scene.cloud_cover_pct,
            created_at=utc_now_iso(),
            model_id=result.model_id,
        )
        if store is not None:
            store.append(obs)
        observations.append(obs)
        previous = PreviousObservation(image=attachment, aui=value)
    return AuiSeries(cell_code=cell.code, observations=observations, gap_periods=gaps)
