"""Command-line pipeline: ingest, decompose, common, msar, spectrum, fetch.

Every command reads a YAML run configuration (``--config``) and writes
JSON/CSV results plus ``manifest.json`` into ``<out>/<command>/``.

Exit codes: 0 success, 2 configuration or input error, 3 fit failure
(partial results and the manifest are kept).
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import platform
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path

import numpy as np
import yaml

from . import ingest as ing
from .factors import (Panel, correlation_map, factor_loadings, identify_common_factors,
                      reconstruct, write_factor_paths_csv, write_table_csv)
from .regime import MsarConfig, MsarFitError, fit_msar
from .spectral import find_peaks, periodogram
from .structural import ComponentSpec, FitConfig, FitError, fit_mle, select_model
from .timeseries import TimeSeries, month_index, read_series_csv, write_series_csv

logger = logging.getLogger("ssdecomp")

EXIT_OK, EXIT_CONFIG, EXIT_FIT = 0, 2, 3
COMMANDS = ("ingest", "decompose", "common", "msar", "spectrum", "fetch")

# Defaults for every recognised key; ``None`` means "not set".
SCHEMA = {
    "seed": 0,
    "offline": False,
    "workers": 1,
    "out": None,
    "cache_dir": None,
    "ingest": {
        "grid": None,
        "grids": None,
        "boundary": None,
        "region": {"south": 20.0, "north": 65.0, "west": 110.0, "east": 260.0, "size": 5.0},
        "weighted": False,
        "remove_global_mean": False,
        "max_missing": ing.MAX_MISSING,
    },
    "decompose": {
        "input": None,
        "spec": {"trend": {"order": 2}, "cycle": {}},
        "candidates": None,
        "criterion": "aic",
        "fit": {},
    },
    "common": {
        "kind": "trends",
        "input": None,
        "order": None,
        "depth": None,
        "criterion": "cumulative",
        "threshold": 0.9,
        "ridge": 0.1,
        "reconstruct": [],
        "window": None,
    },
    "msar": {
        "input": None,
        "column": None,
        "truth": None,
        "n_starts": 6,
        "max_iter": 2000,
    },
    "spectrum": {
        "input": None,
        "columns": None,
        "detrend": False,
        "taper": None,
        "n_peaks": 3,
        "trim_missing_ends": False,
    },
    "fetch": {
        "urls": {},
    },
}

_PATH_KEYS = {("ingest", "grid"), ("decompose", "input"), ("common", "input"),
              ("msar", "input"), ("spectrum", "input")}


class ConfigError(ValueError):
    pass


class CommandFailed(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _merge(defaults: dict, given: dict, where: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown configuration key {where}{key!r}")
        sub = defaults[key]
        if isinstance(sub, dict) and key not in ("spec", "fit", "urls"):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}{key} must be a mapping")
            out[key] = _merge(sub, val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Read and validate a run configuration; relative paths are resolved
    against the configuration file's directory."""
    raw, base = {}, Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"configuration file {path} does not exist")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must contain a mapping")
        base = path.resolve().parent
    cfg = _merge(SCHEMA, raw, "")
    for section, key in _PATH_KEYS:
        if cfg[section][key] is not None:
            cfg[section][key] = str((base / cfg[section][key]).resolve())
    if cfg["ingest"]["grids"] is not None:
        cfg["ingest"]["grids"] = [str((base / g).resolve()) for g in cfg["ingest"]["grids"]]
    if cfg["out"] is not None:
        cfg["out"] = str((base / cfg["out"]).resolve())
    if cfg["cache_dir"] is not None:
        cfg["cache_dir"] = str((base / cfg["cache_dir"]).resolve())
    for key, val in (overrides or {}).items():
        if val is not None:
            cfg[key] = val
    if cfg["out"] is None:
        cfg["out"] = str(Path.cwd() / "ssdecomp-out")
    try:
        cfg["seed"] = int(cfg["seed"])
        cfg["workers"] = int(cfg["workers"])
    except (TypeError, ValueError):
        raise ConfigError("seed and workers must be integers") from None
    if cfg["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def config_hash(cfg: dict, command: str) -> str:
    """Hash of the settings that affect ``command``'s results."""
    relevant = {k: cfg[k] for k in ("seed", "offline")}
    relevant[command] = cfg.get(command)
    blob = json.dumps(relevant, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _require_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} {p} does not exist")
    return p


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return None if math.isnan(x) or math.isinf(x) else x
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("ssdecomp", "numpy", "scipy", "numba", "pyyaml"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def write_manifest(outdir: Path, command: str, cfg: dict, status: str, errors=()) -> None:
    files = []
    for p in sorted(outdir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            data = p.read_bytes()
            files.append({"name": p.relative_to(outdir).as_posix(), "bytes": len(data),
                          "sha256": hashlib.sha256(data).hexdigest()})
    write_json(outdir / "manifest.json", {
        "command": command,
        "status": status,
        "errors": list(errors),
        "config_hash": config_hash(cfg, command),
        "seed": cfg["seed"],
        "versions": _versions(),
        "files": files,
    })


def _safe_name(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name) or "series"


def _read_locations(directory: Path) -> dict:
    path = directory / "boxes.csv"
    if not path.is_file():
        return {}
    out = {}
    for line in path.read_text().splitlines()[1:]:
        label, lat, lon = line.split(",")
        out[label] = (float(lat), float(lon))
    return out


def _write_locations(path: Path, labels, locations: dict) -> None:
    with open(path, "w") as fh:
        fh.write("label,lat,lon\n")
        for label in labels:
            if label in locations:
                lat, lon = locations[label]
                fh.write(f"{label},{lat!r},{lon!r}\n")


def _load_series(path, what: str) -> list[TimeSeries]:
    p = _require_file(path, what)
    try:
        return read_series_csv(p)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(cfg: dict, outdir: Path) -> list[str]:
    c = cfg["ingest"]
    try:
        region = ing.BoxRegion(**c["region"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"ingest.region: {exc}") from None
    report = {}
    try:
        if c["grids"]:
            if len(c["grids"]) != 2 or c["boundary"] is None:
                raise ConfigError("ingest.grids takes two files and needs ingest.boundary")
            a, b = (ing.read_grid_csv(_require_file(g, "grid file")) for g in c["grids"])
            stitched = ing.stitch_datasets(a, b, str(c["boundary"]))
            field = stitched.field
            report["overlap_months"] = stitched.overlap_months
            if stitched.overlap_offsets is not None:
                coarse = ing.box_average(
                    ing.GriddedField(stitched.overlap_offsets[None], a.lat_edges, a.lon_edges),
                    region, c["weighted"])
                report["overlap_offsets"] = {
                    ing.box_label(la, lo): coarse.values[0, i, j]
                    for i, la in enumerate(coarse.lat_edges[:-1])
                    for j, lo in enumerate(coarse.lon_edges[:-1])}
        else:
            field = ing.read_grid_csv(_require_file(c["grid"], "grid file"))
        coarse = ing.box_average(field, region, weighted=bool(c["weighted"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if c["remove_global_mean"]:
        try:
            coarse = ing.remove_monthly_global_mean(coarse)
        except ValueError as exc:
            raise CommandFailed(str(exc)) from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            boxes = ing.to_panel(coarse, region, max_missing=float(c["max_missing"]))
        except ValueError as exc:
            raise CommandFailed(str(exc)) from None
    report["warnings"] = [str(w.message) for w in caught]
    report["n_boxes"] = len(boxes)
    report["start"], report["end"] = coarse.start, coarse.end
    write_series_csv(outdir / "panel.csv", [b.series for b in boxes])
    _write_locations(outdir / "boxes.csv", [b.label for b in boxes],
                     {b.label: (b.lat, b.lon) for b in boxes})
    write_json(outdir / "ingest.json", report)
    return []


def _fit_one(args):
    series, spec_dicts, criterion, fit_kwargs = args
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            specs = [ComponentSpec.from_dict(d) for d in spec_dicts]
            config = FitConfig(**fit_kwargs)
            if len(specs) == 1:
                result = fit_mle(specs[0], series, config)
            else:
                result = select_model(specs, series, criterion, config)[0].result
        except (FitError, np.linalg.LinAlgError) as exc:
            return None, str(exc), [str(w.message) for w in caught]
    return result, None, [str(w.message) for w in caught]


def cmd_decompose(cfg: dict, outdir: Path) -> list[str]:
    c = cfg["decompose"]
    path = c["input"] or str(Path(cfg["out"]) / "ingest" / "panel.csv")
    series = _load_series(path, "decompose input")
    if not series or all(s.n_observed == 0 for s in series):
        raise ConfigError(f"{path} contains no observations")
    spec_dicts = c["candidates"] if c["candidates"] else [c["spec"]]
    try:
        for d in spec_dicts:
            ComponentSpec.from_dict(d)
        FitConfig(**c["fit"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"decompose spec: {exc}") from None
    if c["criterion"] not in ("aic", "bic"):
        raise ConfigError("decompose.criterion must be aic or bic")
    jobs = [(s, spec_dicts, c["criterion"], dict(c["fit"])) for s in series]
    if cfg["workers"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg["workers"]) as pool:
            outcomes = list(pool.map(_fit_one, jobs))
    else:
        outcomes = [_fit_one(j) for j in jobs]
    results, errors, records = [], [], []
    for s, (res, err, warns) in zip(series, outcomes):
        if res is None:
            errors.append(f"{s.name}: {err}")
            records.append({"name": s.name, "error": err, "warnings": warns})
        else:
            results.append(res)
            records.append(dict(res.to_dict(), has_cycle=res.has_cycle, warnings=warns))
    write_json(outdir / "results.json", records)
    if results:
        for comp in ("trend", "seasonal", "cycle", "irregular", "obs_error"):
            if comp == "seasonal" and all(r.fitted_spec.seasonal is None for r in results):
                continue
            if comp == "cycle" and not any(r.has_cycle for r in results):
                continue
            if comp == "irregular" and all(r.fitted_spec.ar is None for r in results):
                continue
            paths = [getattr(r, f"{comp}_path").with_values(
                getattr(r, f"{comp}_path").values, name=r.series.name) for r in results]
            write_series_csv(outdir / f"{comp}.csv", paths)
        locations = _read_locations(Path(path).parent)
        if locations:
            _write_locations(outdir / "boxes.csv", [r.series.name for r in results], locations)
    return errors


def cmd_common(cfg: dict, outdir: Path) -> list[str]:
    c = cfg["common"]
    kind = c["kind"]
    if kind not in ("trends", "cycles"):
        raise ConfigError("common.kind must be 'trends' or 'cycles'")
    component = "trend" if kind == "trends" else "cycle"
    decomp_dir = Path(cfg["out"]) / "decompose"
    path = c["input"] or str(decomp_dir / f"{component}.csv")
    if c["input"] is None:
        results = decomp_dir / "results.json"
        if not results.is_file():
            raise ConfigError(f"no decomposition results in {decomp_dir}; run decompose first")
        if kind == "cycles":
            records = json.loads(results.read_text())
            lacking = [r["name"] for r in records if not r.get("has_cycle")]
            if lacking or not Path(path).is_file():
                raise CommandFailed("common cycles need a cycle component in every "
                                    f"decomposition; missing for: {', '.join(lacking) or 'all'}")
    series = _load_series(path, "common input")
    locations = _read_locations(Path(path).parent)
    names = [s.name for s in series]
    try:
        panel = Panel.from_arrays(np.vstack([s.values for s in series]), names,
                                  [locations.get(n) for n in names], series[0].start,
                                  series[0].step)
    except ValueError as exc:
        raise CommandFailed(f"{path}: {exc}") from None
    depth = c["depth"]
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            model = identify_common_factors(panel, order=c["order"], past_lags=depth,
                                            future_lags=depth, ridge=float(c["ridge"]),
                                            criterion=c["criterion"],
                                            threshold=float(c["threshold"]))
    except ValueError as exc:
        raise CommandFailed(str(exc)) from None
    write_factor_paths_csv(outdir / "factors.csv", model)
    write_table_csv(outdir / "loadings.csv", factor_loadings(model))
    write_table_csv(outdir / "correlation_factor1.csv",
                    correlation_map(panel, model.factor_paths[0]))
    s = model.singular_values
    share = np.cumsum(s**2) / np.sum(s**2) if np.sum(s**2) > 0 else np.zeros_like(s)
    with open(outdir / "singular_values.csv", "w") as fh:
        fh.write("index,singular_value,cumulative_share\n")
        for k, (sv, sh) in enumerate(zip(s, share), start=1):
            fh.write(f"{k},{float(sv)!r},{float(sh)!r}\n")
    info = dict(model.to_dict(), kind=kind, warnings=[str(w.message) for w in caught])
    window = None
    if c["window"] is not None:
        try:
            w0, w1 = (month_index(str(w)) - month_index(panel.start) for w in c["window"])
        except (TypeError, ValueError):
            raise ConfigError("common.window must be two YYYY-MM stamps") from None
        window = (w0 // panel.step, w1 // panel.step)
    reports = []
    for label in c["reconstruct"] or []:
        if label not in names:
            raise ConfigError(f"common.reconstruct: no series named {label!r}")
        try:
            rep = reconstruct(model, panel, names.index(label), window=window)
        except ValueError as exc:
            raise ConfigError(f"common.reconstruct: {exc}") from None
        reports.append({"series": label, "window": rep.window, "rows": rep.to_rows()})
        paths = [TimeSeries(rep.target, panel.start, panel.step, name="target")]
        paths += [TimeSeries(rep.paths[k], panel.start, panel.step, name=f"k{k + 1}")
                  for k in range(rep.paths.shape[0])]
        write_series_csv(outdir / f"reconstruction_{_safe_name(label)}.csv", paths)
    info["reconstruction"] = reports
    write_json(outdir / "common.json", info)
    return []


def cmd_msar(cfg: dict, outdir: Path) -> list[str]:
    c = cfg["msar"]
    series = _load_series(c["input"], "msar input")
    by_name = {s.name: s for s in series}
    column = c["column"] or series[0].name
    if column not in by_name:
        raise ConfigError(f"msar.column {column!r} not found in {c['input']}")
    y = by_name[column]
    config = MsarConfig(n_starts=int(c["n_starts"]), max_iter=int(c["max_iter"]),
                        seed=cfg["seed"], workers=cfg["workers"])
    try:
        result = fit_msar(y, config)
    except (MsarFitError, ValueError) as exc:
        raise CommandFailed(str(exc)) from None
    info = result.to_dict()
    regimes = result.classify()
    if c["truth"] is not None:
        if c["truth"] not in by_name:
            raise ConfigError(f"msar.truth {c['truth']!r} not found in {c['input']}")
        truth = by_name[c["truth"]].values
        ok = np.isfinite(truth)
        info["classification_accuracy"] = float(np.mean(regimes[ok] == truth[ok]))
    write_json(outdir / "msar.json", info)
    out = [y.with_values(result.filtered_probs[:, 0], name="filtered_high"),
           y.with_values(result.smoothed_probs[:, 0], name="smoothed_high"),
           y.with_values(regimes.astype(float), name="regime"),
           y.with_values(result.smoothed_state_path, name="smoothed_mean")]
    write_series_csv(outdir / "regimes.csv", out)
    return []


def _trim(values: np.ndarray) -> tuple[np.ndarray, int]:
    ok = np.flatnonzero(np.isfinite(values))
    if ok.size == 0:
        return values[:0], 0
    return values[ok[0]: ok[-1] + 1], int(ok[0])


def cmd_spectrum(cfg: dict, outdir: Path) -> list[str]:
    c = cfg["spectrum"]
    path = c["input"] or str(Path(cfg["out"]) / "common" / "factors.csv")
    series = _load_series(path, "spectrum input")
    names = c["columns"] or [s.name for s in series]
    by_name = {s.name: s for s in series}
    missing = [n for n in names if n not in by_name]
    if missing:
        raise ConfigError(f"spectrum.columns not found in {path}: {missing}")
    peaks, errors = {}, []
    for name in names:
        s = by_name[name]
        values = np.array(s.values)
        if c["trim_missing_ends"]:
            values, _ = _trim(values)
        try:
            spec = periodogram(TimeSeries(values, s.start, s.step, name=name),
                               detrend=bool(c["detrend"]), taper=c["taper"])
        except ValueError as exc:
            errors.append(f"{name}: {exc}")
            continue
        spec.to_csv(outdir / f"spectrum_{_safe_name(name)}.csv")
        peaks[name] = [{"period_months": p.period, "period_years": p.period / 12.0,
                        "power": p.power, "frequency": p.frequency}
                       for p in find_peaks(spec, int(c["n_peaks"]))]
    write_json(outdir / "peaks.json", peaks)
    return errors


def cmd_fetch(cfg: dict, outdir: Path) -> list[str]:
    urls = cfg["fetch"]["urls"]
    if not isinstance(urls, dict) or not urls:
        raise ConfigError("fetch.urls must map series names to URLs")
    errors, written = [], []
    for name, url in urls.items():
        try:
            ts = ing.fetch_index(str(url), cfg["cache_dir"], offline=bool(cfg["offline"]),
                                 name=str(name))
        except (ing.FetchError, ing.IndexParseError) as exc:
            errors.append(f"{name}: {exc}")
            continue
        write_series_csv(outdir / f"{_safe_name(str(name))}.csv", [ts])
        written.append({"name": name, "url": url, "start": ts.start, "step": ts.step,
                        "length": len(ts), "cache_file": ing.cache_path(str(url), cfg["cache_dir"]).name})
    write_json(outdir / "fetch.json", written)
    return errors


HANDLERS = {"ingest": cmd_ingest, "decompose": cmd_decompose, "common": cmd_common,
            "msar": cmd_msar, "spectrum": cmd_spectrum, "fetch": cmd_fetch}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssdecomp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "box-average gridded CSV data into a panel of series",
        "decompose": "fit structural decompositions to every series",
        "common": "identify common trends or cycles of the decomposed panel",
        "msar": "fit a two-regime Markov-switching AR(2) model",
        "spectrum": "periodograms and spectral peaks",
        "fetch": "download (or read cached) index series",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        p.add_argument("--offline", action="store_true", default=None,
                       help="never touch the network; serve downloads from the cache")
        p.add_argument("--workers", type=int, help="parallel workers")
        p.add_argument("--out", help="output root directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "fetch":
            p.add_argument("--cache-dir", help=f"download cache (default ${ing.CACHE_ENV} "
                                               "or ~/.cache/ssdecomp)")
            p.add_argument("--url", action="append", default=[], metavar="NAME=URL",
                           help="index to fetch (repeatable)")
        if name == "common":
            p.add_argument("--kind", choices=("trends", "cycles"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed, "offline": args.offline, "workers": args.workers,
                 "out": None if args.out is None else str(Path(args.out).resolve())}
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "fetch":
            if args.cache_dir:
                cfg["cache_dir"] = str(Path(args.cache_dir).resolve())
            for item in args.url:
                name, sep, url = item.partition("=")
                if not sep:
                    raise ConfigError(f"--url expects NAME=URL, got {item!r}")
                cfg["fetch"]["urls"] = dict(cfg["fetch"]["urls"], **{name: url})
        if args.command == "common" and args.kind:
            cfg["common"]["kind"] = args.kind
    except ConfigError as exc:
        print(f"ssdecomp {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outdir = Path(cfg["out"]) / args.command
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        errors = HANDLERS[args.command](cfg, outdir)
    except ConfigError as exc:
        print(f"ssdecomp {args.command}: configuration error: {exc}", file=sys.stderr)
        write_manifest(outdir, args.command, cfg, "config-error", [str(exc)])
        return EXIT_CONFIG
    except CommandFailed as exc:
        print(f"ssdecomp {args.command}: failed: {exc}", file=sys.stderr)
        write_manifest(outdir, args.command, cfg, "failed", [str(exc)])
        return EXIT_FIT
    if errors:
        for e in errors:
            print(f"ssdecomp {args.command}: failed: {e}", file=sys.stderr)
        write_manifest(outdir, args.command, cfg, "partial", errors)
        return EXIT_FIT
    write_manifest(outdir, args.command, cfg, "ok")
    logger.info("wrote %s", outdir)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
