"""Common trends and cycles of a panel by canonical-correlation subspace identification.

The panel is centered and scaled per series. Lag covariances of the
panel fill a block Hankel matrix between stacked futures and stacked
pasts; weighting it by the inverse square roots of the past and future
covariances gives canonical correlations as its singular values. The top
``m`` canonical directions applied to stacked pasts and futures estimate
the state (factor) sequence, and loadings and transition follow by least
squares.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .timeseries import TimeSeries

logger = logging.getLogger(__name__)

DEFAULT_RIDGE = 0.1
FALLBACK_RIDGE = 1e-8
MAX_COND = 1e12
MAX_ORDER = 8
MAX_DEPTH = 24
UNDEFINED = "NA"


# ---------------------------------------------------------------------------
# panel
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Panel:
    """``q`` aligned series, stored centered and scaled as a ``(q, T)`` array.

    ``means`` and ``scales`` undo the standardisation; a series without
    variation keeps scale 1. ``locations`` holds one ``(lat, lon)`` pair or
    ``None`` per series.
    """

    values: np.ndarray
    means: np.ndarray
    scales: np.ndarray
    names: tuple
    locations: tuple
    start: str = "1900-01"
    step: int = 1

    @classmethod
    def from_arrays(cls, data, names=None, locations=None, start: str = "1900-01",
                    step: int = 1) -> "Panel":
        data = np.array(data, dtype=float)
        if data.ndim == 1:
            data = data[None, :]
        if data.ndim != 2:
            raise ValueError("panel data must be (q, T)")
        if not np.all(np.isfinite(data)):
            raise ValueError("panel series must be complete and finite")
        q = data.shape[0]
        names = tuple(names) if names is not None else tuple(f"s{k}" for k in range(q))
        locations = tuple(locations) if locations is not None else (None,) * q
        if len(names) != q or len(locations) != q:
            raise ValueError("names and locations must have one entry per series")
        means = data.mean(axis=1)
        scales = data.std(axis=1)
        scales = np.where(scales > 0, scales, 1.0)
        values = (data - means[:, None]) / scales[:, None]
        return cls(values, means, scales, names, locations, start, step)

    @property
    def n_series(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def scale(self, x, index=None) -> np.ndarray:
        """Map data-unit values to the standardised scale."""
        m, s = self._meta(index)
        return (np.asarray(x, dtype=float) - m) / s

    def unscale(self, z, index=None) -> np.ndarray:
        """Map standardised values back to data units."""
        m, s = self._meta(index)
        return np.asarray(z, dtype=float) * s + m

    def _meta(self, index):
        if index is None:
            return self.means[:, None], self.scales[:, None]
        return self.means[index], self.scales[index]

    def data(self) -> np.ndarray:
        """The panel in data units."""
        return self.unscale(self.values)


def _panel_from_paths(paths: list[TimeSeries], names, locations) -> Panel:
    if not paths:
        raise ValueError("at least one decomposition is required")
    first = paths[0]
    for k, p in enumerate(paths[1:], start=1):
        if not p.same_time_base(first):
            raise ValueError(f"series {k} does not share the time base of series 0")
    if names is None:
        names = [p.name or f"s{k}" for k, p in enumerate(paths)]
    return Panel.from_arrays(np.vstack([p.values for p in paths]), names, locations,
                             first.start, first.step)


def prepare_trend_panel(decomps, names=None, locations=None) -> Panel:
    """Panel of smoothed trend paths, one row per decomposition."""
    paths = [d.trend_path for d in decomps]
    if names is None:
        names = [d.series.name or f"s{k}" for k, d in enumerate(decomps)]
    return _panel_from_paths(paths, names, locations)


def prepare_cycle_panel(decomps, names=None, locations=None) -> Panel:
    """Panel of smoothed cycle paths; every decomposition must contain a cycle."""
    for k, d in enumerate(decomps):
        if not d.has_cycle:
            raise ValueError(f"decomposition {k} has no cycle component")
    paths = [d.cycle_path for d in decomps]
    if names is None:
        names = [d.series.name or f"s{k}" for k, d in enumerate(decomps)]
    return _panel_from_paths(paths, names, locations)


# ---------------------------------------------------------------------------
# Hankel matrix
# ---------------------------------------------------------------------------

def default_depth(n_series: int, length: int) -> int:
    """Past and future depth: 24 samples, bounded by T/10 and by 100/q."""
    return max(1, min(MAX_DEPTH, length // 10, 100 // max(n_series, 1)))


def lag_covariances(values: np.ndarray, max_lag: int) -> np.ndarray:
    """``L[h] = (1/T) sum_t y(t+h) y(t)'`` for ``h = 0..max_lag``; ``values`` is ``(q, T)``."""
    q, T = values.shape
    out = np.empty((max_lag + 1, q, q))
    for h in range(max_lag + 1):
        out[h] = values[:, h:] @ values[:, :T - h].T / T
    return out


def _block_toeplitz(lags: np.ndarray, n: int, future: bool) -> np.ndarray:
    q = lags.shape[1]
    M = np.empty((n * q, n * q))
    for a in range(n):
        for b in range(n):
            h = a - b if future else b - a
            blk = lags[h] if h >= 0 else lags[-h].T
            M[a * q:(a + 1) * q, b * q:(b + 1) * q] = blk
    return M


def _inverse_sqrt(W: np.ndarray, ridge: float, label: str) -> np.ndarray:
    n = W.shape[0]
    W = 0.5 * (W + W.T)
    if ridge > 0:
        W = W + ridge * np.trace(W) / n * np.eye(n)
    w, V = np.linalg.eigh(W)
    if w[0] <= 0 or w[-1] / w[0] > MAX_COND:
        warnings.warn(f"{label} covariance is singular; adding a ridge of "
                      f"{FALLBACK_RIDGE:g} x trace", RuntimeWarning, stacklevel=3)
        W = W + FALLBACK_RIDGE * np.trace(W) * np.eye(n)
        w, V = np.linalg.eigh(W)
    return (V / np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class Hankel:
    """Block Hankel of lag covariances and its canonical weighting.

    ``covariance`` has future blocks down the rows and past blocks across
    the columns, block ``(a, b)`` being the lag ``a + b + 1`` covariance.
    ``weighted`` is ``future_weight @ covariance @ past_weight``; its
    singular values are the (ridge-shrunk) canonical correlations.
    """

    covariance: np.ndarray
    past_weight: np.ndarray
    future_weight: np.ndarray
    weighted: np.ndarray
    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray
    past_lags: int
    future_lags: int
    ridge: float


def build_hankel(panel: Panel, past_lags: int, future_lags: int,
                 ridge: float = DEFAULT_RIDGE) -> Hankel:
    """Canonically weighted block Hankel of the panel.

    ``ridge`` adds ``ridge * trace(W) / dim`` to both weighting covariances,
    shrinking the canonical correlations of poorly determined directions.
    With ``ridge=0`` the weighting is plain canonical-correlation weighting.
    """
    i, j = int(past_lags), int(future_lags)
    if i < 1 or j < 1:
        raise ValueError("past and future lags must be at least 1")
    q, T = panel.values.shape
    if T <= i + j:
        raise ValueError(f"series too short: length {T} needs to exceed past + future lags ({i + j})")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    lags = lag_covariances(panel.values, i + j)
    H = np.empty((j * q, i * q))
    for a in range(j):
        for b in range(i):
            H[a * q:(a + 1) * q, b * q:(b + 1) * q] = lags[a + b + 1]
    Kp = _inverse_sqrt(_block_toeplitz(lags, i, future=False), ridge, "past-stacked")
    Kf = _inverse_sqrt(_block_toeplitz(lags, j, future=True), ridge, "future-stacked")
    M = Kf @ H @ Kp
    U, s, Vt = np.linalg.svd(M)
    return Hankel(H, Kp, Kf, M, U, s, Vt, i, j, float(ridge))


def stacked_pasts(values: np.ndarray, past_lags: int) -> np.ndarray:
    """Columns ``[y(t-1); ...; y(t-i)]`` for ``t = i .. T-1``."""
    q, T = values.shape
    return np.vstack([values[:, past_lags - 1 - b: T - 1 - b] for b in range(past_lags)])


def stacked_futures(values: np.ndarray, future_lags: int) -> np.ndarray:
    """Columns ``[y(t); ...; y(t+j-1)]`` for ``t = 0 .. T-j``."""
    q, T = values.shape
    return np.vstack([values[:, a: T - future_lags + 1 + a] for a in range(future_lags)])


def factor_states(values: np.ndarray, hk: Hankel, m: int) -> np.ndarray:
    """Standardised ``(m, T)`` state paths from the top ``m`` canonical pairs.

    The past canonical variates (right singular directions on stacked
    pasts) lag the state and the future variates lead it, so their average
    is used. It exists for ``t = i .. T-j``; other steps are NaN.
    """
    i, j = hk.past_lags, hk.future_lags
    T = values.shape[1]
    past = hk.right[:m] @ hk.past_weight @ stacked_pasts(values, i)
    future = hk.left[:, :m].T @ hk.future_weight @ stacked_futures(values, j)
    X = 0.5 * (past[:, :T - j - i + 1] + future[:, i:])
    X = X - X.mean(axis=1, keepdims=True)
    sd = X.std(axis=1)
    out = np.full((m, T), np.nan)
    out[:, i:T - j + 1] = X / np.where(sd > 0, sd, 1.0)[:, None]
    return out


# ---------------------------------------------------------------------------
# order selection
# ---------------------------------------------------------------------------

def select_order(singular_values, criterion: str = "cumulative", threshold: float = 0.9,
                 order: int | None = None, max_order: int = MAX_ORDER) -> int:
    """Recommended number of common factors.

    ``cumulative``: smallest ``m`` whose squared singular values reach
    ``threshold`` of the total, capped at ``max_order``. ``elbow``: position
    of the largest second difference. ``fixed``: ``order`` as given.
    """
    s = np.asarray(singular_values, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("empty singular-value spectrum")
    if criterion == "fixed":
        if order is None or order < 1:
            raise ValueError("the fixed criterion needs order >= 1")
        return int(order)
    if criterion == "cumulative":
        energy = s**2
        total = energy.sum()
        if total <= 0:
            return 1
        share = np.cumsum(energy) / total
        m = int(np.searchsorted(share, threshold - 1e-12) + 1)
        return max(1, min(m, max_order, s.size))
    if criterion == "elbow":
        if s.size < 3:
            return 1
        second = s[:-2] - 2 * s[1:-1] + s[2:]
        return max(1, min(int(np.argmax(second)) + 1, max_order))
    raise ValueError(f"unknown order criterion {criterion!r}")


# ---------------------------------------------------------------------------
# identification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CommonFactorModel:
    """Fitted common factors of a panel.

    ``factor_paths`` is ``(m, T)``, defined on ``support`` (steps with a
    full past and future window) and NaN elsewhere, standardised there to
    zero mean and unit variance. ``loadings`` map factors to the
    standardised panel and ``transition`` propagates them one step.
    """

    factor_paths: np.ndarray
    loadings: np.ndarray
    transition: np.ndarray
    singular_values: np.ndarray
    order: int
    means: np.ndarray
    scales: np.ndarray
    names: tuple
    locations: tuple
    start: str
    step: int
    past_lags: int
    future_lags: int
    ridge: float

    @property
    def support(self) -> slice:
        return slice(self.past_lags, self.factor_paths.shape[1] - self.future_lags + 1)

    def loadings_data_units(self) -> np.ndarray:
        return self.loadings * self.scales[:, None]

    def factor_series(self) -> list[TimeSeries]:
        return [TimeSeries(self.factor_paths[k], self.start, self.step, name=f"factor_{k + 1}")
                for k in range(self.order)]

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "past_lags": self.past_lags,
            "future_lags": self.future_lags,
            "ridge": self.ridge,
            "singular_values": self.singular_values.tolist(),
            "transition": self.transition.tolist(),
            "series": list(self.names),
        }


def _least_squares(X: np.ndarray, Y: np.ndarray, what: str) -> np.ndarray:
    """Coefficients ``B`` with ``Y ~ B X``; rows of ``X`` are regressors."""
    G = X @ X.T
    w = np.linalg.eigvalsh(G)
    if w[0] <= 0 or w[-1] / w[0] > MAX_COND:
        warnings.warn(f"{what} regression is rank deficient; adding a ridge of "
                      f"{FALLBACK_RIDGE:g} x trace", RuntimeWarning, stacklevel=3)
        G = G + FALLBACK_RIDGE * np.trace(G) * np.eye(G.shape[0])
    return np.linalg.solve(G, X @ Y.T).T


def identify_common_factors(panel: Panel, order: int | None = None,
                            past_lags: int | None = None, future_lags: int | None = None,
                            ridge: float = DEFAULT_RIDGE, criterion: str = "cumulative",
                            threshold: float = 0.9) -> CommonFactorModel:
    """Estimate factor paths, loadings and transition of the panel.

    ``order=None`` picks the order with :func:`select_order`.
    """
    q, T = panel.values.shape
    depth = default_depth(q, T)
    i = depth if past_lags is None else int(past_lags)
    j = depth if future_lags is None else int(future_lags)
    hk = build_hankel(panel, i, j, ridge)
    s = hk.singular_values
    if order is None:
        m = select_order(s, criterion, threshold)
    else:
        m = int(order)
    if not 1 <= m <= min(q * i, q * j):
        raise ValueError(f"order must lie in [1, {min(q * i, q * j)}], got {m}")
    if s[m - 1] <= 1e-12 * s[0]:
        rank = int(np.sum(s > 1e-12 * s[0]))
        raise ValueError(f"order {m} exceeds the numerical rank ({rank}) of the Hankel matrix")

    paths = factor_states(panel.values, hk, m)
    support = slice(i, T - j + 1)
    X = paths[:, support]
    Y = panel.values[:, support]
    Y = Y - Y.mean(axis=1, keepdims=True)
    C = _least_squares(X, Y, "loading")
    # sign convention: largest-magnitude loading positive (first index on ties)
    flip = np.sign(C[np.argmax(np.abs(C), axis=0), np.arange(m)])
    flip[flip == 0] = 1.0
    C = C * flip
    X = X * flip[:, None]
    paths = paths * flip[:, None]
    Phi = _least_squares(X[:, :-1], X[:, 1:], "transition")
    return CommonFactorModel(paths, C, Phi, s.copy(), m, panel.means.copy(),
                             panel.scales.copy(), panel.names, panel.locations,
                             panel.start, panel.step, i, j, float(ridge))


# ---------------------------------------------------------------------------
# loadings, correlations, reconstruction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoadingTable:
    names: tuple
    locations: tuple
    values: np.ndarray  # (q, m), data units

    def to_rows(self) -> list[dict]:
        return _table_rows(self.names, self.locations, self.values, "loading")


def factor_loadings(model: CommonFactorModel) -> LoadingTable:
    """Loadings in data units per series, with location metadata."""
    return LoadingTable(model.names, model.locations, model.loadings_data_units())


@dataclass(frozen=True)
class CorrelationTable:
    """Pearson correlations; NaN marks series (or factors) without variation."""

    names: tuple
    locations: tuple
    values: np.ndarray  # (q,)

    def to_rows(self) -> list[dict]:
        return _table_rows(self.names, self.locations, self.values[:, None], "correlation")


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    da, db = np.sqrt(a @ a), np.sqrt(b @ b)
    if da <= 1e-12 * np.sqrt(a.size) or db <= 1e-12 * np.sqrt(b.size):
        return float("nan")
    return float(np.clip(a @ b / (da * db), -1.0, 1.0))


def correlation_map(panel: Panel, factor_path) -> CorrelationTable:
    """Correlation of every panel series with a factor path (NaN steps skipped)."""
    f = np.asarray(factor_path.values if isinstance(factor_path, TimeSeries) else factor_path,
                   dtype=float).ravel()
    if f.size != panel.length:
        raise ValueError(f"factor path has length {f.size}, panel has {panel.length}")
    ok = np.isfinite(f)
    raw = panel.data()
    r = np.array([_pearson(raw[k, ok], f[ok]) for k in range(panel.n_series)])
    return CorrelationTable(panel.names, panel.locations, r)


@dataclass(frozen=True)
class ReconstructionReport:
    """Per-k refits of one panel series on the first k factors.

    ``paths[k-1]`` is the k-factor refit in data units, NaN off the factor
    support; correlations and R² are computed over the support.
    ``window_r2`` is filled when a window was requested.
    """

    series_index: int
    name: str
    target: np.ndarray
    paths: np.ndarray
    correlations: np.ndarray
    r2: np.ndarray
    window: tuple | None = None
    window_r2: np.ndarray | None = None

    def to_rows(self) -> list[dict]:
        rows = []
        for k in range(len(self.r2)):
            row = {"k": k + 1, "correlation": float(self.correlations[k]),
                   "r2": float(self.r2[k])}
            if self.window_r2 is not None:
                row["window_r2"] = float(self.window_r2[k])
            rows.append(row)
        return rows


def _r2(y: np.ndarray, fit: np.ndarray) -> float:
    ss = np.sum((y - y.mean()) ** 2)
    if ss <= 0:
        return float("nan")
    return float(1.0 - np.sum((y - fit) ** 2) / ss)


def reconstruct(model: CommonFactorModel, panel: Panel, series_index: int, k: int | None = None,
                window: tuple | None = None) -> ReconstructionReport:
    """Least-squares refit of one series on the first 1..k factor paths.

    Each refit includes an intercept, so R² is non-decreasing in k. ``window=(start, stop)`` additionally scores the
    refits over that index range.
    """
    q = panel.n_series
    if not 0 <= series_index < q:
        raise IndexError(f"series index {series_index} out of range for {q} series")
    if panel.length != model.factor_paths.shape[1] or panel.n_series != len(model.names):
        raise ValueError("panel does not match the model")
    k = model.order if k is None else int(k)
    if not 1 <= k <= model.order:
        raise ValueError(f"k must lie in [1, {model.order}], got {k}")
    if window is not None:
        w0, w1 = int(window[0]), int(window[1])
        sup = model.support
        if not sup.start <= w0 < w1 <= sup.stop:
            raise ValueError(f"window must lie within the factor support [{sup.start}, {sup.stop})")
    y = panel.unscale(panel.values[series_index], series_index)
    sup = model.support
    F = model.factor_paths[:, sup]
    paths = np.full((k, panel.length), np.nan)
    corr, r2, wr2 = np.empty(k), np.empty(k), np.empty(k)
    for kk in range(1, k + 1):
        design = np.vstack([np.ones(F.shape[1]), F[:kk]]).T
        beta = np.linalg.lstsq(design, y[sup], rcond=None)[0]
        paths[kk - 1, sup] = design @ beta
        corr[kk - 1] = _pearson(y[sup], paths[kk - 1, sup])
        r2[kk - 1] = _r2(y[sup], paths[kk - 1, sup])
        if window is not None:
            wr2[kk - 1] = _r2(y[w0:w1], paths[kk - 1, w0:w1])
    return ReconstructionReport(series_index, panel.names[series_index], y, paths, corr,
                                r2, None if window is None else (w0, w1),
                                None if window is None else wr2)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    return UNDEFINED if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def _table_rows(names, locations, values, label) -> list[dict]:
    rows = []
    for n, loc, vals in zip(names, locations, values):
        row = {"series": n,
               "lat": None if loc is None else float(loc[0]),
               "lon": None if loc is None else float(loc[1])}
        for k, v in enumerate(np.atleast_1d(vals)):
            key = label if np.size(vals) == 1 else f"{label}_{k + 1}"
            row[key] = float(v)
        rows.append(row)
    return rows


def write_table_csv(path, table) -> None:
    """Write a loading or correlation table; undefined values appear as ``NA``."""
    rows = table.to_rows()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = list(rows[0].keys()) if rows else ["series", "lat", "lon"]
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[h] if h == "series" else _fmt(row[h]) for h in header])


def write_factor_paths_csv(path, model: CommonFactorModel) -> None:
    """Factor paths as a time-indexed CSV; steps off the support are ``NA``."""
    stamps = TimeSeries(np.zeros(model.factor_paths.shape[1]), model.start, model.step).stamps()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date"] + [f"factor_{k + 1}" for k in range(model.order)])
        for t, stamp in enumerate(stamps):
            writer.writerow([stamp] + [_fmt(model.factor_paths[k, t]) for k in range(model.order)])
