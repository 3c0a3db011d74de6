"""Uniformly sampled series with calendar metadata and a missing-value mask."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


def parse_month(stamp: str) -> tuple[int, int]:
    """Parse ``YYYY-MM`` (or ``YYYY-MM-DD``) into ``(year, month)``."""
    parts = str(stamp).strip().split("-")
    if len(parts) < 2:
        raise ValueError(f"expected YYYY-MM, got {stamp!r}")
    year, month = int(parts[0]), int(parts[1])
    if not 1 <= month <= 12:
        raise ValueError(f"month out of range in {stamp!r}")
    return year, month


def month_index(stamp: str) -> int:
    """Months since year 0; differences give calendar gaps."""
    year, month = parse_month(stamp)
    return 12 * year + (month - 1)


def format_month(index: int) -> str:
    year, month0 = divmod(int(index), 12)
    return f"{year:04d}-{month0 + 1:02d}"


@dataclass(frozen=True)
class TimeSeries:
    """A scalar series sampled every ``step`` months from ``start``.

    Missing values are carried as NaN in ``values``; ``missing`` is derived
    from them unless given explicitly.
    """

    values: np.ndarray
    start: str = "1900-01"
    step: int = 1
    missing: np.ndarray | None = field(default=None)
    name: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).copy()
        if values.ndim != 1:
            raise ValueError("TimeSeries holds a 1-D series")
        if self.missing is None:
            missing = np.isnan(values)
        else:
            missing = np.asarray(self.missing, dtype=bool).copy()
            if missing.shape != values.shape:
                raise ValueError("values and missing mask differ in length")
            values[missing] = np.nan
        if int(self.step) <= 0:
            raise ValueError("step must be positive")
        parse_month(self.start)
        values.setflags(write=False)
        missing.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing", missing)
        object.__setattr__(self, "step", int(self.step))

    def __len__(self):
        return self.values.shape[0]

    @property
    def n_observed(self) -> int:
        return int((~self.missing).sum())

    def month_indices(self) -> np.ndarray:
        return month_index(self.start) + self.step * np.arange(len(self))

    def stamps(self) -> list[str]:
        return [format_month(m) for m in self.month_indices()]

    def decimal_years(self) -> np.ndarray:
        return self.month_indices() / 12.0

    def with_values(self, values, name: str | None = None) -> "TimeSeries":
        """Same time base, new values."""
        return TimeSeries(values, self.start, self.step, name=self.name if name is None else name)

    def same_time_base(self, other: "TimeSeries") -> bool:
        return (len(self) == len(other) and self.step == other.step
                and month_index(self.start) == month_index(other.start))


def as_observations(y) -> np.ndarray:
    """Coerce a TimeSeries, 1-D or 2-D array into a ``(T, q)`` float array (NaN = missing)."""
    if isinstance(y, TimeSeries):
        arr = np.array(y.values, dtype=float)
    else:
        arr = np.array(y, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError("observations must be 1-D or (T, q)")
    return arr


MISSING_MARKERS = {"", "na", "nan"}


def read_series_csv(path) -> list[TimeSeries]:
    """Read a ``date,<name>,...`` CSV of aligned series (empty or ``NA`` = missing).

    Dates are ``YYYY-MM`` on a uniform monthly step; the step is taken
    from the first two rows.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip().lower() != "date" or len(header) < 2:
            raise ValueError(f"{path}: expected a header 'date,<series>,...'")
        names = [h.strip() for h in header[1:]]
        months, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}, line {lineno}: expected {len(header)} fields")
            try:
                months.append(month_index(row[0]))
                rows.append([np.nan if c.strip().lower() in MISSING_MARKERS else float(c)
                             for c in row[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}, line {lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    m = np.asarray(months)
    step = int(m[1] - m[0]) if m.size > 1 else 1
    if step <= 0 or np.any(np.diff(m) != step):
        raise ValueError(f"{path}: dates are not on a uniform increasing step")
    data = np.asarray(rows, dtype=float)
    start = format_month(m[0])
    return [TimeSeries(data[:, k], start, step, name=n) for k, n in enumerate(names)]


def write_series_csv(path, series) -> None:
    """Write aligned series as ``date,<name>,...``; missing values as ``NA``."""
    series = list(series)
    if not series:
        raise ValueError("nothing to write")
    first = series[0]
    for s in series[1:]:
        if not s.same_time_base(first):
            raise ValueError(f"series {s.name!r} does not share the time base of {first.name!r}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date"] + [s.name for s in series])
        for t, stamp in enumerate(first.stamps()):
            writer.writerow([stamp] + ["NA" if np.isnan(s.values[t]) else repr(float(s.values[t]))
                                       for s in series])
