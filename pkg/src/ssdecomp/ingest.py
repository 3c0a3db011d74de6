"""Gridded-field preparation and index download.

Fields are monthly cubes ``(time, lat, lon)`` with NaN for missing cells.
Coordinates are cell edges in degrees, longitudes in [0, 360). Coarse
boxes are labelled by their southwest corner.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import os
import re
import tempfile
import urllib.error
import urllib.request
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .timeseries import TimeSeries, format_month, month_index

logger = logging.getLogger(__name__)

CACHE_ENV = "SSDECOMP_CACHE"
MAX_MISSING = 0.2
_TOL = 1e-6


class FetchError(RuntimeError):
    pass


class IndexParseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

def _edges(x, name) -> np.ndarray:
    e = np.asarray(x, dtype=float).ravel()
    if e.size < 2 or np.any(np.diff(e) <= 0):
        raise ValueError(f"{name} edges must be strictly increasing with at least two entries")
    return e


@dataclass(frozen=True)
class GriddedField:
    """Monthly field on a regular or irregular lat/lon grid."""

    values: np.ndarray
    lat_edges: np.ndarray
    lon_edges: np.ndarray
    start: str = "1900-01"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        lat = _edges(self.lat_edges, "latitude")
        lon = _edges(self.lon_edges, "longitude")
        if v.ndim != 3 or v.shape[1:] != (lat.size - 1, lon.size - 1):
            raise ValueError(f"values of shape {v.shape} do not match {lat.size - 1} x "
                             f"{lon.size - 1} cells")
        if lat[0] < -90 - _TOL or lat[-1] > 90 + _TOL:
            raise ValueError("latitudes must lie in [-90, 90]")
        if lon[0] < -_TOL or lon[-1] > 360 + _TOL:
            raise ValueError("longitudes must lie in [0, 360]")
        month_index(self.start)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "lat_edges", lat)
        object.__setattr__(self, "lon_edges", lon)

    @property
    def n_times(self) -> int:
        return self.values.shape[0]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def lat_centers(self) -> np.ndarray:
        return 0.5 * (self.lat_edges[1:] + self.lat_edges[:-1])

    @property
    def lon_centers(self) -> np.ndarray:
        return 0.5 * (self.lon_edges[1:] + self.lon_edges[:-1])

    def month_indices(self) -> np.ndarray:
        return month_index(self.start) + np.arange(self.n_times)

    def stamps(self) -> list[str]:
        return [format_month(m) for m in self.month_indices()]

    @property
    def end(self) -> str:
        """Stamp of the last time step."""
        return format_month(month_index(self.start) + self.n_times - 1)

    def same_grid(self, other: "GriddedField") -> bool:
        return (self.lat_edges.shape == other.lat_edges.shape
                and self.lon_edges.shape == other.lon_edges.shape
                and np.allclose(self.lat_edges, other.lat_edges, atol=_TOL, rtol=0)
                and np.allclose(self.lon_edges, other.lon_edges, atol=_TOL, rtol=0))

    def select_time(self, start: str | None = None, stop: str | None = None) -> "GriddedField":
        """Steps with ``start <= time < stop``."""
        m = self.month_indices()
        lo = m[0] if start is None else month_index(start)
        hi = m[-1] + 1 if stop is None else month_index(stop)
        keep = (m >= lo) & (m < hi)
        if not keep.any():
            raise ValueError("time selection is empty")
        first = int(np.argmax(keep))
        return GriddedField(self.values[keep], self.lat_edges, self.lon_edges,
                            format_month(m[first]))


def _format_lat(lat: float) -> str:
    return f"{abs(lat):g}{'N' if lat >= 0 else 'S'}"


def _format_lon(lon: float) -> str:
    lon = lon % 360.0
    if lon == 0 or lon == 180:
        return f"{lon:g}"
    return f"{lon:g}E" if lon < 180 else f"{360 - lon:g}W"


def box_label(south: float, west: float) -> str:
    """Label of a box by its southwest corner, e.g. ``30N120E`` or ``55N135W``."""
    return _format_lat(south) + _format_lon(west)


def _divides(extent: float, size: float) -> bool:
    n = extent / size
    return abs(n - round(n)) < 1e-9 and round(n) >= 1


@dataclass(frozen=True)
class BoxRegion:
    """Rectangle ``[south, north) x [west, east)`` tiled by square boxes of ``size`` degrees.

    Longitudes are in [0, 360); a region east of 180 is written e.g. as
    ``west=110, east=260`` for 110°E to 100°W.
    """

    south: float
    north: float
    west: float
    east: float
    size: float = 5.0

    def __post_init__(self):
        if not -90 <= self.south < self.north <= 90:
            raise ValueError("need -90 <= south < north <= 90")
        if not 0 <= self.west < self.east <= 360:
            raise ValueError("need 0 <= west < east <= 360 (longitudes in [0, 360))")
        if self.size <= 0:
            raise ValueError("box size must be positive")
        if not (_divides(self.north - self.south, self.size)
                and _divides(self.east - self.west, self.size)):
            raise ValueError(f"box size {self.size} does not divide the region extent")

    @property
    def lat_edges(self) -> np.ndarray:
        n = int(round((self.north - self.south) / self.size))
        return self.south + self.size * np.arange(n + 1)

    @property
    def lon_edges(self) -> np.ndarray:
        n = int(round((self.east - self.west) / self.size))
        return self.west + self.size * np.arange(n + 1)


# ---------------------------------------------------------------------------
# box averaging, stitching, anomalies
# ---------------------------------------------------------------------------

def _uniform_step(edges: np.ndarray, name: str) -> float:
    d = np.diff(edges)
    if np.ptp(d) > _TOL:
        raise ValueError(f"{name} spacing is not uniform")
    return float(d[0])


def _locate(edges: np.ndarray, value: float, name: str) -> int:
    k = np.flatnonzero(np.abs(edges - value) < _TOL)
    if k.size == 0:
        raise ValueError(f"{name} {value:g} is not a cell edge of the field")
    return int(k[0])


def box_average(field: GriddedField, region: BoxRegion, weighted: bool = False) -> GriddedField:
    """Mean of the non-missing fine cells in each box of ``region``.

    ``weighted`` uses cos(latitude) cell weights; the default is the plain
    mean. A box is missing at a time step when all its cells are.
    """
    dlat = _uniform_step(field.lat_edges, "latitude")
    dlon = _uniform_step(field.lon_edges, "longitude")
    if not (_divides(region.size, dlat) and _divides(region.size, dlon)):
        raise ValueError(f"grid resolution {dlat:g} x {dlon:g} does not divide the box size "
                         f"{region.size:g}")
    i0 = _locate(field.lat_edges, region.south, "region south edge")
    i1 = _locate(field.lat_edges, region.north, "region north edge")
    j0 = _locate(field.lon_edges, region.west, "region west edge")
    j1 = _locate(field.lon_edges, region.east, "region east edge")
    ki, kj = int(round(region.size / dlat)), int(round(region.size / dlon))
    sub = field.values[:, i0:i1, j0:j1]
    T = sub.shape[0]
    nb_lat, nb_lon = (i1 - i0) // ki, (j1 - j0) // kj
    blocks = sub.reshape(T, nb_lat, ki, nb_lon, kj)
    if weighted:
        w = np.cos(np.radians(field.lat_centers[i0:i1])).reshape(nb_lat, ki)
        w = np.broadcast_to(w[:, :, None, None], (nb_lat, ki, nb_lon, kj))
    else:
        w = np.ones((nb_lat, ki, nb_lon, kj))
    ok = ~np.isnan(blocks)
    num = np.where(ok, blocks, 0.0) * w
    den = ok * w
    total = num.sum(axis=(2, 4))
    weight = den.sum(axis=(2, 4))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(weight > 0, total / np.where(weight > 0, weight, 1.0), np.nan)
    return GriddedField(out, region.lat_edges, region.lon_edges, field.start)


@dataclass(frozen=True)
class StitchResult:
    """Stitched field and the per-box mean ``b - a`` over any overlap (NaN where none)."""

    field: GriddedField
    overlap_offsets: np.ndarray | None
    overlap_months: int


def stitch_datasets(a: GriddedField, b: GriddedField, boundary: str) -> StitchResult:
    """Use ``a`` before ``boundary`` and ``b`` from ``boundary`` on.

    No adjustment is applied at the seam; where the inputs overlap the mean
    per-box offset is reported and logged.
    """
    if not a.same_grid(b):
        raise ValueError("datasets are on different grids")
    cut = month_index(boundary)
    ma, mb = a.month_indices(), b.month_indices()
    if ma[0] >= cut:
        raise ValueError(f"first dataset starts at {a.start}, not before the boundary {boundary}")
    if mb[-1] < cut:
        raise ValueError(f"second dataset ends at {b.end}, before the boundary {boundary}")
    if ma[-1] < cut - 1:
        raise ValueError(f"gap at the boundary: first dataset ends at {a.end}, "
                         f"expected {format_month(cut - 1)} or later")
    if mb[0] > cut:
        raise ValueError(f"gap at the boundary: second dataset starts at {b.start}, "
                         f"expected {boundary} or earlier")
    lo, hi = max(ma[0], mb[0]), min(ma[-1], mb[-1])
    offsets, n_overlap = None, 0
    if hi >= lo:
        n_overlap = int(hi - lo + 1)
        va = a.values[lo - ma[0]: hi - ma[0] + 1]
        vb = b.values[lo - mb[0]: hi - mb[0] + 1]
        diff = vb - va
        ok = ~np.isnan(diff)
        with np.errstate(invalid="ignore"):
            offsets = np.where(ok.any(axis=0), np.where(ok, diff, 0).sum(axis=0)
                               / np.maximum(ok.sum(axis=0), 1), np.nan)
        logger.info("overlap of %d months between datasets; mean offset (second - first) "
                    "ranges %.4g to %.4g", n_overlap, np.nanmin(offsets) if ok.any() else np.nan,
                    np.nanmax(offsets) if ok.any() else np.nan)
    head = a.values[: cut - ma[0]]
    tail = b.values[cut - mb[0]:]
    field = GriddedField(np.concatenate([head, tail]), a.lat_edges, a.lon_edges, a.start)
    return StitchResult(field, offsets, n_overlap)


def remove_monthly_global_mean(field: GriddedField) -> GriddedField:
    """Subtract, at each time step, the mean over all non-missing boxes.

    The mean is taken over every box present in ``field``.
    """
    v = field.values
    ok = ~np.isnan(v)
    count = ok.sum(axis=(1, 2))
    empty = np.flatnonzero(count == 0)
    if empty.size:
        raise ValueError(f"time step {field.stamps()[empty[0]]} has no data")
    mean = np.where(ok, v, 0.0).sum(axis=(1, 2)) / count
    return GriddedField(v - mean[:, None, None], field.lat_edges, field.lon_edges, field.start)


@dataclass(frozen=True)
class BoxSeries:
    series: TimeSeries
    label: str
    lat: float  # southwest corner
    lon: float
    lat_index: int
    lon_index: int

    @property
    def location(self) -> tuple:
        return (self.lat, self.lon)


def to_panel(field: GriddedField, region: BoxRegion | None = None,
             max_missing: float = MAX_MISSING) -> list[BoxSeries]:
    """One series per grid box of ``field`` inside ``region``.

    Boxes missing more than ``max_missing`` of their values are dropped
    with a warning naming them.
    """
    lat0, lon0 = field.lat_edges[:-1], field.lon_edges[:-1]
    if region is None:
        rows, cols = np.arange(lat0.size), np.arange(lon0.size)
    else:
        if (region.south < field.lat_edges[0] - _TOL or region.north > field.lat_edges[-1] + _TOL
                or region.west < field.lon_edges[0] - _TOL
                or region.east > field.lon_edges[-1] + _TOL):
            raise ValueError("region extends beyond the field")
        rows = np.flatnonzero((lat0 >= region.south - _TOL) & (lat0 < region.north - _TOL))
        cols = np.flatnonzero((lon0 >= region.west - _TOL) & (lon0 < region.east - _TOL))
    out, dropped = [], []
    for i in rows:
        for j in cols:
            label = box_label(lat0[i], lon0[j])
            v = field.values[:, i, j]
            if np.isnan(v).mean() > max_missing:
                dropped.append(label)
                continue
            ts = TimeSeries(v, field.start, 1, name=label)
            out.append(BoxSeries(ts, label, float(lat0[i]), float(lon0[j]), int(i), int(j)))
    if dropped:
        warnings.warn(f"{len(dropped)} boxes with more than {max_missing:.0%} missing values "
                      f"excluded: {', '.join(dropped)}", RuntimeWarning, stacklevel=2)
    if not out:
        raise ValueError("no grid boxes selected")
    return out


# ---------------------------------------------------------------------------
# grid CSV
# ---------------------------------------------------------------------------

def _grid_axis(centers: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    u = np.unique(centers)
    if u.size == 1:
        raise ValueError(f"cannot infer the {name} resolution from a single cell; "
                         "supply at least two distinct values")
    step = float(np.min(np.diff(u)))
    pos = (u - u[0]) / step
    if np.any(np.abs(pos - np.round(pos)) > 1e-6):
        raise ValueError(f"{name} cell centres are not on a regular grid")
    n = int(round(pos[-1])) + 1
    edges = u[0] - step / 2 + step * np.arange(n + 1)
    return edges, np.round((centers - u[0]) / step).astype(int)


def read_grid_csv(path) -> GriddedField:
    """Read a ``time,lat,lon,value`` CSV (cell centres; empty value = missing)."""
    times, lats, lons, vals = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:4]] != ["time", "lat", "lon", "value"]:
            raise ValueError(f"{path}: expected header time,lat,lon,value")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            try:
                if len(row) != 4:
                    raise ValueError("expected 4 fields")
                times.append(month_index(row[0]))
                lats.append(float(row[1]))
                lons.append(float(row[2]) % 360.0)
                vals.append(float(row[3]) if row[3].strip() else np.nan)
            except ValueError as exc:
                raise ValueError(f"{path}, line {lineno}: {exc}") from None
    if not times:
        raise ValueError(f"{path}: no data rows")
    times = np.asarray(times)
    lat_edges, li = _grid_axis(np.asarray(lats), "latitude")
    lon_edges, lj = _grid_axis(np.asarray(lons), "longitude")
    t0 = times.min()
    ti = times - t0
    cube = np.full((ti.max() + 1, lat_edges.size - 1, lon_edges.size - 1), np.nan)
    seen = np.zeros(cube.shape, dtype=bool)
    for t, i, j, v in zip(ti, li, lj, vals):
        if seen[t, i, j]:
            raise ValueError(f"{path}: duplicate entry for {format_month(t0 + t)} at "
                             f"({lat_edges[i] + (lat_edges[1] - lat_edges[0]) / 2:g}, "
                             f"{lon_edges[j] + (lon_edges[1] - lon_edges[0]) / 2:g})")
        seen[t, i, j] = True
        cube[t, i, j] = v
    return GriddedField(cube, lat_edges, lon_edges, format_month(t0))


def write_grid_csv(path, field: GriddedField) -> None:
    """Write every cell and time step; missing values as empty fields."""
    lat_c, lon_c = field.lat_centers, field.lon_centers
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time", "lat", "lon", "value"])
        for t, stamp in enumerate(field.stamps()):
            for i, la in enumerate(lat_c):
                for j, lo in enumerate(lon_c):
                    v = field.values[t, i, j]
                    writer.writerow([stamp, f"{la:g}", f"{lo:g}", "" if np.isnan(v) else repr(float(v))])


# ---------------------------------------------------------------------------
# index files
# ---------------------------------------------------------------------------

_SPLIT = re.compile(r"[,\s;]+")
_MISSING_TOKENS = {"nan", "na", ""}


def parse_index(text: str, name: str = "") -> TimeSeries:
    """Parse ``YYYY MM value`` (or ``YYYY-MM value``) lines; ``#`` starts a comment.

    Rows must be in time order on a common monthly step (1 for monthly,
    3 for quarterly data); skipped steps become missing values.
    """
    stamps, values, lines = [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = [t for t in _SPLIT.split(line) if t]
        try:
            if len(tok) == 3:
                year, month = int(tok[0]), int(tok[1])
                val = tok[2]
            elif len(tok) == 2 and "-" in tok[0]:
                year, month = (int(p) for p in tok[0].split("-")[:2])
                val = tok[1]
            else:
                raise ValueError("expected 'YYYY MM value'")
            if not 1 <= month <= 12:
                raise ValueError(f"month {month} out of range")
            v = np.nan if val.lower() in _MISSING_TOKENS else float(val)
        except ValueError as exc:
            raise IndexParseError(f"line {lineno}: cannot parse {raw.strip()!r} ({exc})") from None
        stamps.append(12 * year + month - 1)
        values.append(v)
        lines.append(lineno)
    if not stamps:
        raise IndexParseError("no data rows found")
    m = np.asarray(stamps)
    d = np.diff(m)
    for k in np.flatnonzero(d <= 0):
        raise IndexParseError(f"line {lines[k + 1]}: time is not after the previous row")
    step = int(d.min()) if d.size else 1
    for k in np.flatnonzero(d % step):
        raise IndexParseError(f"line {lines[k + 1]}: spacing is not a multiple of {step} months")
    out = np.full((m[-1] - m[0]) // step + 1, np.nan)
    out[(m - m[0]) // step] = values
    return TimeSeries(out, format_month(m[0]), step, name=name)


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path.home() / ".cache" / "ssdecomp"


def cache_path(url: str, cache_dir=None) -> Path:
    root = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    return root / (hashlib.sha256(url.encode("utf-8")).hexdigest() + ".dat")


def fetch_index(url: str, cache_dir=None, offline: bool = False, timeout: float = 30.0,
                name: str | None = None) -> TimeSeries:
    """Download (or read from cache) an index file and parse it.

    Raw bytes are cached under a hash of the URL and written by atomic
    rename. With ``offline`` only the cache is consulted.
    """
    path = cache_path(url, cache_dir)
    if path.exists():
        logger.debug("cache hit for %s", url)
        data = path.read_bytes()
    elif offline:
        raise FetchError(f"{url} is not cached in {path.parent} and offline mode is on")
    else:
        try:
            with urllib.request.urlopen(url, timeout=timeout) as resp:
                data = resp.read()
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise FetchError(f"could not download {url} and no cached copy exists: {exc}") from exc
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".fetch-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    text = data.decode("utf-8", errors="replace")
    label = name if name is not None else url.rstrip("/").rsplit("/", 1)[-1]
    try:
        return parse_index(text, label)
    except IndexParseError as exc:
        raise IndexParseError(f"{url}: {exc}") from None
