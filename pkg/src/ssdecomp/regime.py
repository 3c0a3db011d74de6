"""Two-regime Markov-switching AR(2) models.

Regime ``r`` follows

    y(t) - mu_r = phi_r1 (y(t-1) - mu_r) + phi_r2 (y(t-2) - mu_r) + sigma_r e(t)

so the conditional density of y(t) depends on the current regime only and
the regime posterior is an exact two-state hidden Markov recursion. The
likelihood conditions on the first two observations. Regime 0 is "High",
regime 1 is "Low", with ``mu_High >= mu_Low``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import _kernels
from .structural import ar_from_partials, partials_from_ar, _expit, _logit
from .timeseries import TimeSeries

logger = logging.getLogger(__name__)

REGIMES = ("High", "Low")
AR_ORDER = 2
N_PARAMS = 10


class MsarFitError(RuntimeError):
    pass


def _ar_stationary(phi) -> bool:
    companion = np.array([[phi[0], phi[1]], [1.0, 0.0]])
    return bool(np.abs(np.linalg.eigvals(companion)).max() < 1.0)


def stationary_distribution(P) -> np.ndarray:
    """Left eigenvector of ``P`` for eigenvalue 1 (minimum-norm if not unique)."""
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    if n == 2 and P[0, 1] + P[1, 0] > 0:
        return np.array([P[1, 0], P[0, 1]]) / (P[0, 1] + P[1, 0])
    M = np.vstack([np.eye(n) - P.T, np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    pi = np.linalg.lstsq(M, b, rcond=None)[0]
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


@dataclass(frozen=True)
class MsarSpec:
    """Parameters of a two-regime AR(2); index 0 is "High", 1 is "Low"."""

    means: tuple
    ar: tuple
    variances: tuple
    transition: tuple

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float).reshape(2)
        ar = np.asarray(self.ar, dtype=float).reshape(2, AR_ORDER)
        var = np.asarray(self.variances, dtype=float).reshape(2)
        P = np.asarray(self.transition, dtype=float).reshape(2, 2)
        if np.any(P < 0) or np.any(P > 1) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("transition rows must be probabilities summing to 1")
        if means[0] < means[1]:
            raise ValueError("the High regime mean must be no lower than the Low regime mean")
        for r in range(2):
            if not _ar_stationary(ar[r]):
                raise ValueError(f"AR polynomial of regime {REGIMES[r]} is not stationary")
            if not var[r] > 0:
                raise ValueError(f"innovation variance of regime {REGIMES[r]} must be positive")
        object.__setattr__(self, "means", tuple(map(float, means)))
        object.__setattr__(self, "ar", tuple(tuple(map(float, row)) for row in ar))
        object.__setattr__(self, "variances", tuple(map(float, var)))
        object.__setattr__(self, "transition", tuple(tuple(map(float, row)) for row in P))

    @property
    def transition_matrix(self) -> np.ndarray:
        return np.array(self.transition)

    def to_dict(self) -> dict:
        return {
            "regimes": list(REGIMES),
            "means": list(self.means),
            "ar": [list(r) for r in self.ar],
            "variances": list(self.variances),
            "transition": [list(r) for r in self.transition],
        }


def _values(y) -> np.ndarray:
    v = np.array(y.values if isinstance(y, TimeSeries) else y, dtype=float).reshape(-1)
    if v.size <= AR_ORDER:
        raise ValueError(f"series must be longer than the AR order ({AR_ORDER})")
    if np.isnan(v).any():
        raise ValueError("missing values are not supported by the regime-switching model")
    return v


def conditional_densities(spec: MsarSpec, y) -> np.ndarray:
    """``(T, 2)`` regime-conditional densities; the first two rows are NaN."""
    v = _values(y)
    T = v.size
    dens = np.full((T, 2), np.nan)
    for r in range(2):
        mu = spec.means[r]
        p1, p2 = spec.ar[r]
        mean = mu + p1 * (v[1:-1] - mu) + p2 * (v[:-2] - mu)
        s2 = spec.variances[r]
        dens[2:, r] = np.exp(-0.5 * (v[2:] - mean) ** 2 / s2) / np.sqrt(2 * np.pi * s2)
    return dens


def _init(spec, init_probs):
    if init_probs is None:
        return stationary_distribution(spec.transition_matrix)
    pi = np.asarray(init_probs, dtype=float).reshape(2)
    if np.any(pi < 0) or not np.isclose(pi.sum(), 1.0):
        raise ValueError("init_probs must be a probability vector")
    return pi


def _run_filter(spec, y, init_probs):
    dens = conditional_densities(spec, y)
    P = spec.transition_matrix
    pred, filt, ll = _kernels.hamilton_loop(dens, P, _init(spec, init_probs))
    return pred, filt, ll


def hamilton_filter(spec: MsarSpec, y, init_probs=None):
    """Filtered regime probabilities ``(T, 2)`` and the conditional log-likelihood.

    Initial probabilities default to the stationary distribution of the
    transition matrix.
    """
    _, filt, ll = _run_filter(spec, y, init_probs)
    return filt, float(ll)


def msar_smooth(spec: MsarSpec, y, init_probs=None) -> np.ndarray:
    """Smoothed regime probabilities by the backward (Kim) pass."""
    pred, filt, ll = _run_filter(spec, y, init_probs)
    if not np.isfinite(ll):
        raise FloatingPointError("data have zero likelihood under every regime")
    return _kernels.kim_smoother_loop(spec.transition_matrix, pred, filt)


def simulate_msar(spec: MsarSpec, length: int, seed=None, burn_in: int = 200):
    """Draw ``(values, regimes)`` of the given length, regimes as 0/1 indices."""
    rng = np.random.default_rng(seed)
    P = spec.transition_matrix
    n = length + burn_in
    s = np.empty(n, dtype=int)
    s[0] = rng.choice(2, p=stationary_distribution(P))
    u = rng.random(n)
    for t in range(1, n):
        s[t] = 0 if u[t] < P[s[t - 1], 0] else 1
    e = rng.standard_normal(n)
    y = np.zeros(n)
    y[:2] = np.asarray(spec.means)[s[:2]]
    for t in range(2, n):
        r = s[t]
        mu = spec.means[r]
        y[t] = (mu + spec.ar[r][0] * (y[t - 1] - mu) + spec.ar[r][1] * (y[t - 2] - mu)
                + np.sqrt(spec.variances[r]) * e[t])
    return y[burn_in:], s[burn_in:]


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------

def _spec_from_theta(theta) -> MsarSpec:
    mu_low = theta[0]
    mu_high = mu_low + np.exp(np.clip(theta[1], -50, 50))
    p_hh, p_ll = _expit(theta[2]), _expit(theta[3])
    var = np.exp(np.clip(theta[4:6], -700, 700))
    ar_h = ar_from_partials(theta[6:8])
    ar_l = ar_from_partials(theta[8:10])
    return MsarSpec((mu_high, mu_low), (ar_h, ar_l), tuple(var),
                    ((p_hh, 1 - p_hh), (1 - p_ll, p_ll)))


def _theta_from_spec(spec: MsarSpec) -> np.ndarray:
    gap = max(spec.means[0] - spec.means[1], 1e-12)
    P = spec.transition_matrix
    clip = lambda p: min(max(p, 1e-9), 1 - 1e-9)  # noqa: E731
    return np.concatenate([
        [spec.means[1], np.log(gap), _logit(clip(P[0, 0])), _logit(clip(P[1, 1]))],
        np.log(spec.variances),
        partials_from_ar(spec.ar[0]), partials_from_ar(spec.ar[1]),
    ])


def _natural(spec: MsarSpec) -> np.ndarray:
    P = spec.transition_matrix
    return np.array([spec.means[0], spec.means[1], P[0, 0], P[1, 1], *spec.variances,
                     *spec.ar[0], *spec.ar[1]])


NATURAL_NAMES = ("mu_High", "mu_Low", "p_High_High", "p_Low_Low", "var_High", "var_Low",
                 "phi_High_1", "phi_High_2", "phi_Low_1", "phi_Low_2")


def _from_natural(x) -> MsarSpec:
    return MsarSpec((x[0], x[1]), ((x[6], x[7]), (x[8], x[9])), (x[4], x[5]),
                    ((x[2], 1 - x[2]), (1 - x[3], x[3])))


def _numerical_hessian(f, x, steps):
    n = x.size
    H = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = steps[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / steps[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = steps[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej)
                                 + f(x - ei - ej)) / (4 * steps[i] * steps[j])
    return H


def standard_errors(spec: MsarSpec, y) -> dict:
    """Asymptotic standard errors from the observed information (numerical Hessian).

    Entries are NaN when the Hessian is not positive definite at ``spec``.
    """
    x0 = _natural(spec)
    # keep probability steps inside (0, 1)
    room = np.full(x0.size, np.inf)
    room[2:4] = np.minimum(x0[2:4], 1 - x0[2:4])
    room[4:6] = x0[4:6]
    steps = np.minimum(1e-4 * np.maximum(np.abs(x0), 1e-2), 0.25 * room)

    def nll(x):
        try:
            return -hamilton_filter(_from_natural(x), y)[1]
        except ValueError:
            return np.nan

    H = _numerical_hessian(nll, x0, steps)
    out = dict.fromkeys(NATURAL_NAMES, float("nan"))
    if np.all(np.isfinite(H)):
        try:
            np.linalg.cholesky(H)
            cov = np.linalg.inv(H)
            out = {n: float(np.sqrt(cov[i, i])) for i, n in enumerate(NATURAL_NAMES)}
        except np.linalg.LinAlgError:
            pass
    return out


@dataclass(frozen=True)
class MsarConfig:
    n_starts: int = 6
    max_iter: int = 2000
    seed: int = 0
    workers: int = 1
    init_probs: tuple | None = None


@dataclass(frozen=True)
class MsarResult:
    spec: MsarSpec
    series: TimeSeries
    filtered_probs: np.ndarray
    smoothed_probs: np.ndarray
    smoothed_state_path: np.ndarray
    log_likelihood: float
    aic: float
    n_params: int = N_PARAMS
    std_errors: dict = field(default_factory=dict)
    converged: bool = True
    n_starts_ok: int = 0

    def classify(self, threshold: float = 0.5) -> np.ndarray:
        """0 where the smoothed High probability exceeds ``threshold``, else 1."""
        return np.where(self.smoothed_probs[:, 0] > threshold, 0, 1)

    def to_dict(self) -> dict:
        return {
            "name": self.series.name,
            "start": self.series.start,
            "step": self.series.step,
            "spec": self.spec.to_dict(),
            "log_likelihood": self.log_likelihood,
            "aic": self.aic,
            "n_params": self.n_params,
            "std_errors": self.std_errors,
            "converged": self.converged,
            "n_starts_ok": self.n_starts_ok,
        }


def _starting_points(v: np.ndarray, n: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    lo, hi = np.quantile(v, [0.25, 0.75])
    var = float(np.var(v))
    starts = []
    for k in range(n):
        if k == 0:
            m_lo, m_hi, p, s2, phi = lo, hi, 0.95, 0.5 * var, (0.3, 0.0)
        elif k == 1:
            m_lo, m_hi, p, s2, phi = np.mean(v) - 1e-3, np.mean(v), 0.8, var, (0.5, 0.0)
        else:
            a, b = np.sort(rng.choice(v, 2, replace=False))
            m_lo, m_hi = a, max(b, a + 1e-3)
            p = rng.uniform(0.6, 0.99)
            s2 = var * rng.uniform(0.2, 1.0)
            phi = (rng.uniform(-0.5, 0.8), rng.uniform(-0.3, 0.3))
        if not _ar_stationary(phi):
            phi = (0.3, 0.0)
        m_hi = max(m_hi, m_lo + 1e-6)
        spec = MsarSpec((m_hi, m_lo), (phi, phi), (s2, s2), ((p, 1 - p), (1 - p, p)))
        starts.append(_theta_from_spec(spec))
    return starts


def _fast_negloglik(theta, v, init):
    """Negative log-likelihood straight from the unconstrained vector.

    Skips spec validation; the transforms guarantee a valid model.
    """
    mu_low = theta[0]
    mu = np.array([mu_low + np.exp(min(theta[1], 50.0)), mu_low])
    p_hh, p_ll = _expit(theta[2]), _expit(theta[3])
    P = np.array([[p_hh, 1 - p_hh], [1 - p_ll, p_ll]])
    var = np.exp(np.clip(theta[4:6], -700, 700))
    phi = np.array([ar_from_partials(theta[6:8]), ar_from_partials(theta[8:10])])
    dens = np.full((v.size, 2), np.nan)
    with np.errstate(over="ignore", invalid="ignore"):
        for r in range(2):
            mean = mu[r] + phi[r, 0] * (v[1:-1] - mu[r]) + phi[r, 1] * (v[:-2] - mu[r])
            dens[2:, r] = (np.exp(-0.5 * (v[2:] - mean) ** 2 / var[r])
                           / np.sqrt(2 * np.pi * var[r]))
    if init is None:
        denom = 2.0 - p_hh - p_ll
        pi = np.array([(1 - p_ll) / denom, (1 - p_hh) / denom]) if denom > 0 else np.full(2, 0.5)
    else:
        pi = np.asarray(init, dtype=float)
    ll = _kernels.hamilton_loop(dens, P, pi)[2]
    return -ll if np.isfinite(ll) else np.inf


def fit_msar(y, config: MsarConfig | None = None) -> MsarResult:
    """Maximum-likelihood fit of the two-regime AR(2) from several starts."""
    config = config or MsarConfig()
    series = y if isinstance(y, TimeSeries) else TimeSeries(np.asarray(y, dtype=float))
    v = _values(series)
    if v.size < 50:
        raise ValueError("regime-switching fits need at least 50 observations")
    if config.n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    init = config.init_probs

    def objective(theta):
        return _fast_negloglik(theta, v, init)

    def run(theta0):
        if not np.isfinite(objective(theta0)):
            return None
        res = optimize.minimize(objective, theta0, method="BFGS",
                                options={"maxiter": config.max_iter, "gtol": 1e-5})
        theta = res.x
        if not np.isfinite(res.fun):
            return None
        # polish; BFGS line searches can stall on flat probability directions
        res2 = optimize.minimize(objective, theta, method="Nelder-Mead",
                                 options={"maxiter": config.max_iter, "xatol": 1e-7,
                                          "fatol": 1e-10, "adaptive": True})
        if res2.fun <= res.fun:
            return res2.fun, res2.x, bool(res.success or res2.success)
        return res.fun, theta, bool(res.success)

    starts = _starting_points(v, config.n_starts, config.seed)
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            outcomes = list(pool.map(run, starts))
    else:
        outcomes = [run(s) for s in starts]
    ok = [o for o in outcomes if o is not None]
    if not ok:
        raise MsarFitError(f"all {len(starts)} starting points gave a non-finite likelihood; "
                           f"series range [{v.min():.3g}, {v.max():.3g}], "
                           f"variance {v.var():.3g}")
    # deterministic choice: best value, earliest start on ties
    best_fun, best_theta, converged = min(ok, key=lambda o: o[0])
    spec = _spec_from_theta(best_theta)
    filt, ll = hamilton_filter(spec, v, init)
    smooth = msar_smooth(spec, v, init)
    path = smooth @ np.asarray(spec.means)
    return MsarResult(spec=spec, series=series, filtered_probs=filt, smoothed_probs=smooth,
                      smoothed_state_path=path, log_likelihood=ll,
                      aic=-2.0 * ll + 2.0 * N_PARAMS, std_errors=standard_errors(spec, v),
                      converged=converged, n_starts_ok=len(ok))
