"""Operator entry point: synth, ingest, score, ndbi, compare.

Exit codes are a stable scripting contract: 0 success, 1 partial (gaps),
2 configuration or input error, 3 catalog/backend failure. Secrets come
only from the environment (AUI_MODEL_API_KEY, AUI_CATALOG_TOKEN); every
other setting lives in the config file or CLI flags, and the effective
configuration is dumped next to the outputs so a run is reproducible from
its config plus the replay cache.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

from . import catalog as catalog_mod
from . import indices, scoring, store, synth
from .catalog import CatalogSource, Period
from .errors import (
    AuiError,
    BackendError,
    ConfigError,
    InputError,
    ParseError,
    ScoringError,
    TransportError,
)
from .geogrid import decode
from .raster import StretchSpec

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_BACKEND = 3


@dataclass
class RunConfig:
    """Everything a pipeline command needs, validated up front."""

    cells: list
    period_from: str
    period_to: str
    catalog: str | None = None
    backend: str = "stub"
    refs: str | None = None
    cache_dir: str = "aui-cache"
    out_dir: str = "aui-out"
    jobs: int = 1
    clamp_step: float | None = None
    stretch: str = "fixed"
    model_endpoint: str | None = None
    model_id: str | None = None
    replay_dir: str | None = None

    _FILE_KEYS = {
        "cells": "cells",
        "from": "period_from",
        "to": "period_to",
        "catalog": "catalog",
        "backend": "backend",
        "refs": "refs",
        "cache_dir": "cache_dir",
        "out_dir": "out_dir",
        "jobs": "jobs",
        "clamp_step": "clamp_step",
        "stretch": "stretch",
        "model_endpoint": "model_endpoint",
        "model_id": "model_id",
        "replay_dir": "replay_dir",
    }

    @classmethod
    def from_args(cls, args):
        values = {}
        config_path = getattr(args, "config", None)
        if config_path:
            try:
                doc = json.loads(Path(config_path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"unreadable config file {config_path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigError(f"config file {config_path} must hold a JSON object")
            unknown = set(doc) - set(cls._FILE_KEYS)
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            for key, attr in cls._FILE_KEYS.items():
                if key in doc:
                    values[attr] = doc[key]
        overrides = {
            "cells": _parse_cells(args.cells) if getattr(args, "cells", None) else None,
            "period_from": getattr(args, "period_from", None),
            "period_to": getattr(args, "period_to", None),
            "catalog": getattr(args, "catalog", None),
            "backend": getattr(args, "backend", None),
            "refs": getattr(args, "refs", None),
            "cache_dir": getattr(args, "cache_dir", None),
            "out_dir": getattr(args, "out", None),
            "jobs": getattr(args, "jobs", None),
            "clamp_step": getattr(args, "clamp_step", None),
            "stretch": getattr(args, "stretch", None),
            "model_endpoint": getattr(args, "endpoint", None),
            "model_id": getattr(args, "model", None),
            "replay_dir": getattr(args, "replay_dir", None),
        }
        for attr, value in overrides.items():
            if value is not None:
                values[attr] = value
        missing = [k for k in ("cells", "period_from", "period_to") if not values.get(k)]
        if missing:
            raise ConfigError(f"missing required settings: {missing}")
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def validate(self):
        if isinstance(self.cells, str):
            self.cells = _parse_cells(self.cells)
        if not self.cells:
            raise ConfigError("at least one cell is required")
        for code in self.cells:
            try:
                decode(code)
            except ParseError as exc:
                raise ConfigError(f"invalid cell code {code!r}: {exc}") from exc
        try:
            first = Period.from_label(self.period_from)
            last = Period.from_label(self.period_to)
        except ParseError as exc:
            raise ConfigError(str(exc)) from exc
        if last < first:
            raise ConfigError(
                f"--from {self.period_from} is after --to {self.period_to}"
            )
        if self.backend not in ("stub", "replay", "remote"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.backend == "remote" and not (self.model_endpoint and self.model_id):
            raise ConfigError("remote backend requires model_endpoint and model_id")
        if self.backend == "replay" and not self.replay_dir:
            raise ConfigError("replay backend requires replay_dir")
        if self.stretch not in ("fixed", "percentile"):
            raise ConfigError(f"unknown stretch mode {self.stretch!r}")
        if int(self.jobs) < 1:
            raise ConfigError("jobs must be >= 1")
        self.jobs = int(self.jobs)
        if self.clamp_step is not None:
            self.clamp_step = float(self.clamp_step)
            if self.clamp_step <= 0:
                raise ConfigError("clamp_step must be positive")

    def periods(self):
        return Period.range_inclusive(self.period_from, self.period_to)

    def stretch_spec(self):
        return StretchSpec(mode=self.stretch)

    def dump(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _parse_cells(value):
    if isinstance(value, (list, tuple)):
        return [str(c).strip() for c in value if str(c).strip()]
    return [c.strip() for c in str(value).split(",") if c.strip()]


def make_source(spec):
    if not spec:
        raise ConfigError("a catalog source (--catalog URL or directory) is required")
    if str(spec).startswith(("http://", "https://")):
        return CatalogSource.remote(spec)
    return CatalogSource.local(spec)


def _run_per_cell(cfg, worker):
    """Run worker(cell_code) for each cell, up to cfg.jobs in parallel."""
    if cfg.jobs == 1 or len(cfg.cells) == 1:
        return [worker(code) for code in cfg.cells]
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        return list(pool.map(worker, cfg.cells))


class _CacheManifest:
    """The ingest cache's manifest: same schema as any local catalog, updated
    atomically so an interrupted run never leaves a corrupt manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.path = self.root / "manifest.json"
        self._lock = threading.Lock()
        self._scenes = []
        if self.path.is_file():
            self._scenes = catalog_mod.load_manifest(self.root)

    def has(self, cell_code, period_label):
        return any(
            s.get("cell") == cell_code and s.get("period") == period_label
            for s in self._scenes
        )

    def add(self, entry):
        with self._lock:
            self._scenes.append(entry)
            tmp = self.path.with_suffix(".json.tmp")
            tmp.write_text(
                json.dumps({"schema_version": 1, "scenes": self._scenes}, indent=2) + "\n"
            )
            tmp.replace(self.path)


def _fetch_band(ref, dest, source):
    dest.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(ref, dict):
        path = ref["path"]
        sample = ref.get("sample")
    else:
        path, sample = ref, None
    if str(path).startswith(("http://", "https://")):
        data = catalog_mod.fetch_asset(str(path), auth=source.auth)
        dest.write_bytes(data)
    else:
        shutil.copyfile(path, dest)
    if sample is not None:
        return {"path": dest.name, "sample": sample}
    return dest.name


def cmd_ingest(args):
    cfg = RunConfig.from_args(args)
    source = make_source(cfg.catalog)
    if source.kind == "remote":
        catalog_mod.configure_request_limit(max(2, cfg.jobs))
    periods = cfg.periods()
    cache_root = Path(cfg.cache_dir)
    cache_root.mkdir(parents=True, exist_ok=True)
    manifest = _CacheManifest(cache_root)
    cfg.dump(cache_root / "ingest_config.json")
    gaps = []
    stats = {"cached": 0, "new": 0}
    stats_lock = threading.Lock()

    def ingest_cell(code):
        cell = decode(code)
        cell_gaps = []
        for period in periods:
            if manifest.has(code, period.label):
                with stats_lock:
                    stats["cached"] += 1
                continue
            scenes = catalog_mod.query_scenes(source, cell, period)
            scenes = catalog_mod.resolve_cloud_cover(scenes)
            if not scenes:
                cell_gaps.append((code, period.label))
                logger.info("gap: no scene for %s %s", code, period.label)
                continue
            scene = catalog_mod.select_representative(scenes, cell=cell, period=period)
            rel = Path("scenes") / code / period.label
            bands = {}
            for name, ref in scene.band_assets.items():
                dest = cache_root / rel / f"{name}.tif"
                bands[name] = _rel_ref(_fetch_band(ref, dest, source), rel)
            manifest.add(
                {
                    "scene_id": scene.scene_id,
                    "cell": code,
                    "acquired_at": scene.acquired_at.isoformat().replace("+00:00", "Z"),
                    "cloud_cover_pct": scene.cloud_cover_pct,
                    "period": period.label,
                    "bands": bands,
                }
            )
            with stats_lock:
                stats["new"] += 1
        return cell_gaps

    for cell_gaps in _run_per_cell(cfg, ingest_cell):
        gaps.extend(cell_gaps)

    (cache_root / "gaps.json").write_text(
        json.dumps(
            {"gaps": [{"cell": c, "period": p} for c, p in sorted(gaps)]}, indent=2
        )
        + "\n"
    )
    print(
        f"ingest: {stats['new']} new scene(s), {stats['cached']} already cached, "
        f"{len(gaps)} gap(s); cache at {cache_root}"
    )
    return EXIT_PARTIAL if gaps else EXIT_OK


def _rel_ref(ref, rel):
    if isinstance(ref, dict):
        return {"path": str(rel / ref["path"]), "sample": ref["sample"]}
    return str(rel / ref)


def _build_backend(cfg):
    if cfg.backend == "stub":
        return synth.stub_backend()
    if cfg.backend == "replay":
        return scoring.ReplayCacheBackend(cfg.replay_dir)
    scoring.configure_request_limit(max(2, cfg.jobs))
    return scoring.RemoteModelBackend(
        cfg.model_endpoint, cfg.model_id, record_dir=cfg.replay_dir
    )


def _load_refs(cfg):
    if cfg.refs:
        return scoring.load_references(cfg.refs)
    if cfg.backend == "stub":
        logger.info("no --refs given; using the synthetic default reference set")
        return synth.default_reference_set()
    raise ConfigError("--refs is required for the remote and replay backends")


def cmd_score(args):
    cfg = RunConfig.from_args(args)
    cache_root = Path(cfg.catalog) if cfg.catalog else Path(cfg.cache_dir)
    if not (cache_root / "manifest.json").is_file():
        raise ConfigError(
            f"no scene manifest under {cache_root}; run 'aui ingest' first "
            "or point --catalog at a local scene directory"
        )
    source = CatalogSource.local(cache_root)
    backend = _build_backend(cfg)
    references = _load_refs(cfg)
    periods = cfg.periods()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "run_config.json")
    series_store = store.SeriesStore(out / "series")

    def score_cell(code):
        cell = decode(code)
        series = scoring.score_series(
            cell,
            periods,
            source,
            backend,
            references,
            stretch=cfg.stretch_spec(),
            clamp_step=cfg.clamp_step,
            store=series_store,
            composites_dir=out / "composites",
        )
        if series.observations:
            store.export_csv(series, out / f"{code}_aui.csv")
            store.emit_chart(
                series.points(), out / f"{code}_aui.svg",
                ylabel="AUI", title=f"AUI for {code}",
            )
        return series

    gaps = 0
    for series in _run_per_cell(cfg, score_cell):
        gaps += len(series.gap_periods)
        print(
            f"score: {series.cell_code}: {len(series.observations)} period(s) scored, "
            f"{len(series.gap_periods)} gap(s)"
        )
    return EXIT_PARTIAL if gaps else EXIT_OK


def cmd_ndbi(args):
    cfg = RunConfig.from_args(args)
    cache_root = Path(cfg.catalog) if cfg.catalog else Path(cfg.cache_dir)
    if not (cache_root / "manifest.json").is_file():
        raise ConfigError(
            f"no scene manifest under {cache_root}; run 'aui ingest' first"
        )
    source = CatalogSource.local(cache_root)
    periods = cfg.periods()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def ndbi_cell(code):
        cell = decode(code)
        series = indices.index_series(cell, periods, source)
        store.write_index_csv(series, out / f"{code}_ndbi.csv")
        points = store.index_points(series)
        if points:
            store.emit_chart(
                points, out / f"{code}_ndbi.svg",
                ylabel="NDBI", title=f"NDBI for {code}",
            )
        return series

    partial = 0
    for series in _run_per_cell(cfg, ndbi_cell):
        partial += len(series.gaps) + len(series.failures)
        flagged = "".join(
            f", {p.label} flagged ({reason})" for p, reason in series.failures
        )
        print(
            f"ndbi: {series.cell_code}: {len(series.entries)} period(s), "
            f"{len(series.gaps)} gap(s){flagged}"
        )
    return EXIT_PARTIAL if partial else EXIT_OK


def _read_ndbi_csv(path):
    points = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            if row.get("scene_mean"):
                points.append((row["period_label"], float(row["scene_mean"])))
    return points


def cmd_compare(args):
    out = Path(getattr(args, "out", None) or "aui-out")
    out.mkdir(parents=True, exist_ok=True)
    cells = _parse_cells(args.cells) if args.cells else []
    if args.bundled:
        if not cells:
            cells = sorted({cell for cell, _metric in store.list_bundled()})
        for code in cells:
            aui_points = store.bundled_series(code, "aui")
            ndbi_points = store.bundled_series(code, "ndbi")
            _write_compare(code, aui_points, ndbi_points, out)
        return EXIT_OK
    if not cells:
        raise ConfigError("--cells is required (or use --bundled)")
    for code in cells:
        series_path = out / "series" / f"{code}.jsonl"
        ndbi_path = out / f"{code}_ndbi.csv"
        if not series_path.is_file() or not ndbi_path.is_file():
            raise ConfigError(
                f"need both {series_path} and {ndbi_path}; run 'aui score' and "
                "'aui ndbi' first (or use --bundled)"
            )
        series = store.SeriesStore(out / "series").load_series(code)
        _write_compare(code, series.points(), _read_ndbi_csv(ndbi_path), out)
    return EXIT_OK


def _write_compare(code, aui_points, ndbi_points, out):
    rows = store.join_points(aui_points, ndbi_points)
    store.write_comparison_csv(rows, out / f"{code}_compare.csv")
    store.emit_chart(
        aui_points,
        out / f"{code}_compare.svg",
        ylabel="AUI",
        title=f"AUI vs NDBI for {code}",
        secondary=ndbi_points,
        secondary_ylabel="NDBI",
    )
    print(
        f"compare: {code}: {len(aui_points)} AUI point(s), "
        f"{len(ndbi_points)} NDBI point(s) -> {out / f'{code}_compare.csv'}"
    )


def cmd_synth(args):
    out = Path(args.out)
    cells = _parse_cells(args.cells)
    if not cells:
        raise ConfigError("--cells is required")
    periods = Period.range_inclusive(args.period_from, args.period_to)
    try:
        lo, hi = (float(v) for v in args.built_range.split(":"))
    except ValueError:
        raise ConfigError("--built-range must look like 0.1:0.9") from None
    cloud_periods = tuple(
        int(v) for v in args.cloud_periods.split(",") if v.strip()
    ) if args.cloud_periods else ()
    builder = synth.default_spec_builder(
        args.seed,
        built_range=(lo, hi),
        cloud_periods=cloud_periods,
        cloud_fraction=args.cloud_fraction,
        size=args.size,
    )
    synth.write_corpus(out, cells, periods, spec_builder=builder)
    refs_note = ""
    if args.with_refs:
        path = synth.write_reference_set(out / "references", seed=args.seed)
        refs_note = f"; references at {path}"
    print(
        f"synth: wrote {len(cells) * len(periods)} scene(s) for {len(cells)} cell(s) "
        f"x {len(periods)} period(s) under {out}{refs_note}"
    )
    return EXIT_OK


def _add_pipeline_flags(parser, *, include_backend=True):
    parser.add_argument("--config", help="JSON config file (flags override it)")
    parser.add_argument("--cells", help="comma-separated geohash cell codes")
    parser.add_argument("--from", dest="period_from", help="first period label, e.g. 2016-01")
    parser.add_argument("--to", dest="period_to", help="last period label, e.g. 2025-01")
    parser.add_argument("--catalog", help="catalog endpoint URL or local scene directory")
    parser.add_argument("--cache-dir", dest="cache_dir", help="ingest cache directory")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--jobs", type=int, help="max cells processed in parallel")
    if include_backend:
        parser.add_argument(
            "--backend", choices=["remote", "stub", "replay"], help="scoring backend"
        )
        parser.add_argument("--refs", help="reference-set JSON file")
        parser.add_argument(
            "--clamp-step", dest="clamp_step", type=float,
            help="optional max per-step AUI change (disabled by default)",
        )
        parser.add_argument(
            "--stretch", choices=["fixed", "percentile"],
            help="composite stretch mode (default fixed 0-0.3 reflectance)",
        )
        parser.add_argument("--endpoint", help="remote model endpoint URL")
        parser.add_argument("--model", help="remote model identifier")
        parser.add_argument(
            "--replay-dir", dest="replay_dir",
            help="replay cache directory (read for --backend replay, recorded to for remote)",
        )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="aui",
        description="Urban development scoring from Sentinel-2 imagery",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--cells", default="tdr70")
    p.add_argument("--from", dest="period_from", default="2016-01")
    p.add_argument("--to", dest="period_to", default="2017-07")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--built-range", dest="built_range", default="0.2:0.7")
    p.add_argument("--cloud-periods", dest="cloud_periods", default="")
    p.add_argument("--cloud-fraction", dest="cloud_fraction", type=float, default=0.4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--with-refs", dest="with_refs", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="cache representative scenes per (cell, period)")
    _add_pipeline_flags(p, include_backend=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("score", help="score cached scenes into per-cell series")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ndbi", help="compute the NDBI baseline series")
    _add_pipeline_flags(p, include_backend=False)
    p.set_defaults(func=cmd_ndbi)

    p = sub.add_parser("compare", help="side-by-side AUI vs NDBI export")
    p.add_argument("--cells", help="comma-separated geohash cell codes")
    p.add_argument("--out", help="output directory holding score/ndbi results")
    p.add_argument(
        "--bundled", action="store_true",
        help="use the packaged demo series instead of run outputs",
    )
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, InputError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TransportError, BackendError, ScoringError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except AuiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
