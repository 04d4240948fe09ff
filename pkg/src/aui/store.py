"""Persistence and export of scored series.

Observations land in an append-only JSON-lines log per cell (an audit trail
for model-produced numbers: overwrites append a new line rather than
rewriting history), and are exported as CSV and SVG line charts. The repo
also bundles four curated demo series for the two Bangalore showcase cells
so export and comparison can be exercised without any scoring run.
"""

from __future__ import annotations

import csv
import json
import logging
import threading
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

from matplotlib.figure import Figure

from .catalog import Period
from .errors import ConflictError, InputError, ParseError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

#: Fixed salt so matplotlib generates identical SVG element ids across runs.
SVG_HASH_SALT = "atlas-urban-index"

_chart_lock = threading.Lock()


def utc_now_iso():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class AuiObservation:
    """One scored (cell, period) point plus its provenance."""

    cell_code: str
    period_label: str
    aui: float
    ndbi_mean: float | None = None
    scene_id: str | None = None
    cloud_cover_pct: float | None = None
    created_at: str | None = None
    model_id: str | None = None

    def __post_init__(self):
        if not (0.0 <= self.aui <= 10.0):
            raise InputError(f"aui {self.aui} outside [0, 10]")
        if abs(self.aui * 10 - round(self.aui * 10)) > 1e-6:
            raise InputError(f"aui {self.aui} is not one-decimal")
        try:
            Period.from_label(self.period_label)
        except ParseError as exc:
            raise InputError(str(exc)) from exc

    def payload(self):
        """Fields that define identity (excludes the audit timestamp)."""
        d = asdict(self)
        d.pop("created_at")
        return d


@dataclass
class AuiSeries:
    """Ordered observations for one cell, with gap periods kept alongside."""

    cell_code: str
    observations: list
    gap_periods: list = field(default_factory=list)

    def __post_init__(self):
        self.observations = sorted(
            self.observations, key=lambda o: Period.from_label(o.period_label)
        )
        labels = [o.period_label for o in self.observations]
        if len(set(labels)) != len(labels):
            raise InputError(f"duplicate periods in series for {self.cell_code}")

    def points(self):
        return [(o.period_label, o.aui) for o in self.observations]


class SeriesStore:
    """Append-only JSON-lines log per cell under one root directory.

    Single writer per cell (enforced in-process with a lock); readers may
    load concurrently. Re-appending an identical observation is a no-op;
    a different payload for the same period is a conflict unless the
    overwrite flag is passed, in which case the old line stays in the log
    as the audit row and the new line supersedes it.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks = {}
        self._locks_guard = threading.Lock()

    def _lock(self, cell_code):
        with self._locks_guard:
            return self._locks.setdefault(cell_code, threading.Lock())

    def path(self, cell_code):
        return self.root / f"{cell_code}.jsonl"

    def _records(self, cell_code):
        path = self.path(cell_code)
        if not path.is_file():
            return []
        records = []
        for i, line in enumerate(path.read_text().splitlines()):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"corrupt log line {i + 1} in {path}: {exc}") from exc
        return records

    def _write_line(self, cell_code, record):
        record = {"schema_version": SCHEMA_VERSION, **record}
        with self.path(cell_code).open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def append(self, obs, *, overwrite=False):
        """Persist one observation; see class docstring for conflict rules."""
        with self._lock(obs.cell_code):
            existing = None
            for rec in self._records(obs.cell_code):
                if rec.get("kind") == "observation" and rec.get("period") == obs.period_label:
                    existing = rec
            if obs.created_at is None:
                obs.created_at = utc_now_iso()
            new_payload = obs.payload()
            if existing is not None:
                old_payload = {
                    "cell_code": existing.get("cell"),
                    "period_label": existing.get("period"),
                    "aui": existing.get("aui"),
                    "ndbi_mean": existing.get("ndbi_mean"),
                    "scene_id": existing.get("scene_id"),
                    "cloud_cover_pct": existing.get("cloud_cover_pct"),
                    "model_id": existing.get("model_id"),
                }
                if old_payload == new_payload:
                    return obs  # idempotent re-append
                if not overwrite:
                    raise ConflictError(
                        f"observation for ({obs.cell_code}, {obs.period_label}) already "
                        "exists with a different payload; pass overwrite=True to replace"
                    )
            self._write_line(
                obs.cell_code,
                {
                    "kind": "observation",
                    "event": "overwrite" if existing is not None else "append",
                    "cell": obs.cell_code,
                    "period": obs.period_label,
                    "aui": obs.aui,
                    "ndbi_mean": obs.ndbi_mean,
                    "scene_id": obs.scene_id,
                    "cloud_cover_pct": obs.cloud_cover_pct,
                    "model_id": obs.model_id,
                    "created_at": obs.created_at,
                },
            )
            return obs

    def record_gap(self, cell_code, period_label):
        Period.from_label(period_label)
        with self._lock(cell_code):
            for rec in self._records(cell_code):
                if rec.get("kind") == "gap" and rec.get("period") == period_label:
                    return
            self._write_line(
                cell_code,
                {
                    "kind": "gap",
                    "cell": cell_code,
                    "period": period_label,
                    "created_at": utc_now_iso(),
                },
            )

    def load_series(self, cell_code):
        """Fold the log into a series: last line per period wins; an
        observation supersedes an earlier gap record for the same period."""
        latest = {}
        gaps = []
        for rec in self._records(cell_code):
            period = rec.get("period")
            if rec.get("kind") == "gap":
                gaps.append(period)
                continue
            if rec.get("kind") != "observation":
                continue
            latest[period] = rec
        observations = [
            AuiObservation(
                cell_code=rec["cell"],
                period_label=rec["period"],
                aui=float(rec["aui"]),
                ndbi_mean=rec.get("ndbi_mean"),
                scene_id=rec.get("scene_id"),
                cloud_cover_pct=rec.get("cloud_cover_pct"),
                created_at=rec.get("created_at"),
                model_id=rec.get("model_id"),
            )
            for rec in latest.values()
        ]
        gap_labels = sorted(
            {g for g in gaps if g not in latest}, key=Period.from_label
        )
        return AuiSeries(
            cell_code=cell_code, observations=observations, gap_periods=gap_labels
        )


def _fmt(value, pattern):
    return "" if value is None else pattern % value


def export_csv(series, path):
    """Write a series as CSV: ISO period labels, one-decimal AUI, six-decimal
    NDBI, stable column order, LF line endings."""
    if not series.observations:
        raise InputError(f"series for {series.cell_code} has no observations to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["cell", "period", "aui", "ndbi_mean", "scene_id", "cloud_cover_pct", "model_id"]
        )
        for o in series.observations:
            writer.writerow(
                [
                    o.cell_code,
                    o.period_label,
                    "%.1f" % o.aui,
                    _fmt(o.ndbi_mean, "%.6f"),
                    o.scene_id or "",
                    _fmt(o.cloud_cover_pct, "%.2f"),
                    o.model_id or "",
                ]
            )
    return path


def write_index_csv(series, path):
    """CSV for an index series: period_label, index_name, scene_mean,
    valid_pixel_count, cloud_cover_pct. Failed periods appear as flagged
    rows with empty numeric fields."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for entry in series.entries:
        rows.append(
            (
                entry.period,
                [
                    entry.period.label,
                    entry.result.index_name,
                    "%.6f" % entry.result.scene_mean,
                    str(entry.result.valid_pixel_count),
                    _fmt(entry.scene.cloud_cover_pct, "%.2f"),
                ],
            )
        )
    for period, _reason in series.failures:
        rows.append((period, [period.label, "NDBI", "", "", ""]))
    rows.sort(key=lambda r: r[0])
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["period_label", "index_name", "scene_mean", "valid_pixel_count", "cloud_cover_pct"]
        )
        for _period, row in rows:
            writer.writerow(row)
    return path


def index_points(series):
    return [(e.period.label, e.result.scene_mean) for e in series.entries]


def build_chart(points, *, ylabel="AUI", title=None, secondary=None, secondary_ylabel=None):
    """Build the line-chart Figure; emit_chart handles deterministic output."""
    if not points:
        raise InputError("chart needs at least one point")
    labels = [p[0] for p in points]
    values = [p[1] for p in points]
    if secondary:
        labels = sorted(
            set(labels) | {p[0] for p in secondary}, key=Period.from_label
        )
    positions = {label: i for i, label in enumerate(labels)}

    fig = Figure(figsize=(9, 4.5))
    ax = fig.add_subplot()
    ax.plot(
        [positions[p[0]] for p in points],
        values,
        marker="o",
        color="tab:blue",
        label=ylabel,
    )
    ax.set_ylabel(ylabel)
    ax.set_xlabel("period")
    ax.grid(True, alpha=0.4)
    if title:
        ax.set_title(title)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    if secondary:
        ax2 = ax.twinx()
        ax2.plot(
            [positions[p[0]] for p in secondary],
            [p[1] for p in secondary],
            marker="s",
            color="tab:orange",
            label=secondary_ylabel or "secondary",
        )
        ax2.set_ylabel(secondary_ylabel or "")
    fig.tight_layout()
    return fig


def emit_chart(
    points,
    path,
    *,
    ylabel="AUI",
    title=None,
    secondary=None,
    secondary_ylabel=None,
):
    """Render a deterministic SVG line chart (period x-axis, value y-axis).

    ``secondary`` switches on the dual-axis mode used for AUI-vs-NDBI
    comparisons. Identical inputs produce byte-identical files. Emission is
    serialised because rc_context mutates matplotlib's global state.
    """
    with _chart_lock, matplotlib.rc_context({"svg.hashsalt": SVG_HASH_SALT}):
        fig = build_chart(
            points,
            ylabel=ylabel,
            title=title,
            secondary=secondary,
            secondary_ylabel=secondary_ylabel,
        )
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def join_points(primary, secondary):
    """Outer-join two (label, value) series on the period label."""
    a = dict(primary)
    b = dict(secondary)
    labels = sorted(set(a) | set(b), key=Period.from_label)
    return [(label, a.get(label), b.get(label)) for label in labels]


def write_comparison_csv(rows, path):
    """Side-by-side AUI/NDBI CSV from join_points output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["period", "aui", "ndbi_mean"])
        for label, aui, ndbi_mean in rows:
            writer.writerow([label, _fmt(aui, "%.1f"), _fmt(ndbi_mean, "%.6f")])
    return path


# -- bundled demo series ----------------------------------------------------

_BUNDLED = {
    ("tdr70", "aui"): "tdr70_aui.json",
    ("tdr70", "ndbi"): "tdr70_ndbi.json",
    ("tdr0t", "aui"): "tdr0t_aui.json",
    ("tdr0t", "ndbi"): "tdr0t_ndbi.json",
}


def list_bundled():
    return sorted(_BUNDLED)


def bundled_series(cell_code, metric):
    """Packaged demo series points for a showcase cell, as (label, value)."""
    key = (cell_code, metric.lower())
    if key not in _BUNDLED:
        raise InputError(
            f"no bundled series for {key}; available: {list_bundled()}"
        )
    text = (
        resources.files("aui").joinpath("data/series").joinpath(_BUNDLED[key]).read_text()
    )
    doc = json.loads(text)
    return [(p["period"], float(p["value"])) for p in doc["points"]]


def bundled_aui_series(cell_code):
    """The packaged AUI demo series as a full AuiSeries."""
    points = bundled_series(cell_code, "aui")
    return AuiSeries(
        cell_code=cell_code,
        observations=[
            AuiObservation(cell_code=cell_code, period_label=label, aui=value)
            for label, value in points
        ],
    )
