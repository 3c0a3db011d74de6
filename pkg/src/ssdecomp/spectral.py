"""Cycle periods, periodograms and spectral peaks."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import windows

from .timeseries import TimeSeries

MIN_LENGTH = 16


def cycle_period(frequency: float, step: float = 1.0) -> float:
    """Period ``2 pi / frequency * step`` of a cycle with angular frequency in (0, pi]."""
    lam = float(frequency)
    if not 0.0 < lam <= np.pi:
        raise ValueError(f"cycle frequency must lie in (0, pi], got {lam}")
    return 2.0 * np.pi / lam * step


@dataclass(frozen=True)
class Spectrum:
    """One-sided periodogram at the Fourier frequencies ``k / T`` (cycles per sample).

    Without a taper the powers sum to the variance of the processed series.
    """

    frequencies: np.ndarray
    power: np.ndarray
    step: float = 1.0
    taper: float = 0.0
    detrended: bool = False

    @property
    def periods(self) -> np.ndarray:
        """Periods in time units (``step / frequency``)."""
        return self.step / self.frequencies

    def to_rows(self) -> list[dict]:
        return [{"frequency": float(f), "period": float(p), "power": float(w)}
                for f, p, w in zip(self.frequencies, self.periods, self.power)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["frequency", "period", "power"])
            for row in self.to_rows():
                writer.writerow([repr(row["frequency"]), repr(row["period"]), repr(row["power"])])


def periodogram(series, detrend: bool = False, taper: float | None = None,
                step: float | None = None) -> Spectrum:
    """Periodogram of a complete series.

    The mean (and with ``detrend`` a least-squares line) is removed first.
    ``taper`` is the fraction of the series cosine-tapered at each end
    (0.1 for the usual split-cosine bell); tapered power is rescaled by the
    mean square of the window. Trend paths are nonstationary, so their
    low-frequency power depends strongly on whether they are detrended.
    """
    if isinstance(series, TimeSeries):
        x = np.array(series.values, dtype=float)
        step = series.step if step is None else step
    else:
        x = np.array(series, dtype=float).ravel()
    step = 1.0 if step is None else float(step)
    if np.isnan(x).any():
        raise ValueError("periodogram needs a series without missing values")
    T = x.size
    if T < MIN_LENGTH:
        raise ValueError(f"periodogram needs at least {MIN_LENGTH} values, got {T}")
    if np.ptp(x) == 0:
        x = np.zeros(T)
    elif detrend:
        t = np.arange(T, dtype=float)
        coef = np.polyfit(t, x, 1)
        x = x - np.polyval(coef, t)
        x = x - x.mean()
    else:
        x = x - x.mean()
    frac = 0.0 if taper is None else float(taper)
    if not 0.0 <= frac <= 0.5:
        raise ValueError("taper fraction must lie in [0, 0.5]")
    if frac > 0:
        w = windows.tukey(T, alpha=2 * frac)
        x = x * w / np.sqrt(np.mean(w**2))
    X = np.fft.rfft(x)
    power = np.abs(X[1:]) ** 2 / T**2
    if T % 2 == 0:
        power[:-1] *= 2.0
    else:
        power *= 2.0
    freqs = np.arange(1, power.size + 1) / T
    return Spectrum(freqs, power, step, frac, bool(detrend))


@dataclass(frozen=True)
class Peak:
    period: float
    power: float
    frequency: float


def find_peaks(spectrum: Spectrum, n: int = 3) -> list[Peak]:
    """The ``n`` largest local maxima, ranked by power (lower frequency first on ties).

    An end point counts as a maximum when it exceeds its only neighbour;
    zero-power points are never peaks.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    p = np.asarray(spectrum.power)
    K = p.size
    idx = []
    for k in range(K):
        left = k == 0 or p[k] > p[k - 1]
        right = k == K - 1 or p[k] >= p[k + 1]
        if left and right and p[k] > 0:
            idx.append(k)
    idx.sort(key=lambda k: (-p[k], k))
    return [Peak(float(spectrum.step / spectrum.frequencies[k]), float(p[k]),
                 float(spectrum.frequencies[k])) for k in idx[:n]]
