"""Structural time-series models: trend, seasonal, stochastic cycle and AR blocks.

A series is decomposed as ``y = trend + seasonal + cycle + ar + e``. Each
component is a small state-space block; :func:`assemble_model` stacks them
block-diagonally. Unknown parameters (``None`` in a spec) are estimated by
maximum likelihood: EM on the variances as a warm start, then a Nelder-Mead
search over all free parameters on transformed (unconstrained) scales.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import linalg, optimize, stats

from .ssm import (DIFFUSE_SCALE, SingularInnovationError, StateSpaceModel, kalman_filter,
                  kalman_smoother, log_likelihood)
from .timeseries import TimeSeries

logger = logging.getLogger(__name__)

SEASONAL_VARIANTS = ("running-sum", "seasonal-difference")
ESTIMATE = "estimate"


class FitError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrendSpec:
    """``order`` 1 is a random walk, 2 an integrated random walk (noise on the slope)."""
    order: int = 2
    variance: float | None = None


@dataclass(frozen=True)
class SeasonalSpec:
    period: int = 12
    variant: str = "running-sum"
    variance: float | None = None


@dataclass(frozen=True)
class CycleSpec:
    """Damped stochastic cycle; ``frequency`` in radians per sample."""
    rho: float | None = None
    frequency: float | None = None
    variance: float | None = None


@dataclass(frozen=True)
class ArSpec:
    order: int = 1
    coefficients: tuple | None = None
    variance: float | None = None


_SUBSPECS = {"trend": TrendSpec, "seasonal": SeasonalSpec, "cycle": CycleSpec, "ar": ArSpec}


@dataclass(frozen=True)
class ComponentSpec:
    """Which components are present and which of their parameters are known.

    Any parameter left as ``None`` is estimated by :func:`fit_mle`.
    """

    trend: TrendSpec | None = field(default_factory=TrendSpec)
    seasonal: SeasonalSpec | None = None
    cycle: CycleSpec | None = None
    ar: ArSpec | None = None
    obs_variance: float | None = None

    def __post_init__(self):
        if self.seasonal is not None and self.seasonal.variant == "none":
            object.__setattr__(self, "seasonal", None)
        if self.ar is not None and self.ar.order == 0:
            object.__setattr__(self, "ar", None)
        if all(getattr(self, c) is None for c in _SUBSPECS):
            raise ValueError("a component spec needs at least one component")
        if self.trend is not None and self.trend.order not in (1, 2):
            raise ValueError(f"trend order must be 1 or 2, got {self.trend.order}")
        if self.seasonal is not None:
            if self.seasonal.variant not in SEASONAL_VARIANTS:
                raise ValueError(f"unknown seasonal variant {self.seasonal.variant!r}")
            if int(self.seasonal.period) < 2:
                raise ValueError("seasonal period must be >= 2")
        if self.cycle is not None:
            rho, lam = self.cycle.rho, self.cycle.frequency
            if rho is not None and not 0.0 < rho <= 1.0:
                raise ValueError("cycle damping rho must lie in (0, 1]")
            if lam is not None and not 0.0 < lam <= np.pi:
                raise ValueError("cycle frequency must lie in (0, pi]")
        if self.ar is not None:
            if self.ar.order not in (1, 2):
                raise ValueError("AR order must be 0, 1 or 2")
            if self.ar.coefficients is not None:
                coefs = tuple(float(c) for c in self.ar.coefficients)
                if len(coefs) != self.ar.order:
                    raise ValueError("AR coefficients do not match the order")
                object.__setattr__(self, "ar", replace(self.ar, coefficients=coefs))
        for name in self.parameter_names():
            val = self.get(name)
            if name.endswith("variance") and val is not None and val < 0:
                raise ValueError(f"{name} must be >= 0")

    # parameter access by dotted name ------------------------------------
    def parameter_names(self) -> list[str]:
        names = []
        if self.trend is not None:
            names.append("trend.variance")
        if self.seasonal is not None:
            names.append("seasonal.variance")
        if self.cycle is not None:
            names += ["cycle.rho", "cycle.frequency", "cycle.variance"]
        if self.ar is not None:
            names += ["ar.coefficients", "ar.variance"]
        names.append("obs_variance")
        return names

    def get(self, name: str):
        if name == "obs_variance":
            return self.obs_variance
        comp, attr = name.split(".")
        return getattr(getattr(self, comp), attr)

    def with_values(self, values: dict) -> "ComponentSpec":
        spec = self
        for name, val in values.items():
            if name == "obs_variance":
                spec = replace(spec, obs_variance=val)
            else:
                comp, attr = name.split(".")
                spec = replace(spec, **{comp: replace(getattr(spec, comp), **{attr: val})})
        return spec

    def free_parameters(self) -> list[str]:
        return [n for n in self.parameter_names() if self.get(n) is None]

    @property
    def n_free(self) -> int:
        """Scalar count of estimated parameters (AR coefficients count individually)."""
        n = 0
        for name in self.free_parameters():
            n += self.ar.order if name == "ar.coefficients" else 1
        return n

    @property
    def resolved(self) -> bool:
        return not self.free_parameters()

    @property
    def state_dim(self) -> int:
        p = 0
        if self.trend is not None:
            p += self.trend.order
        if self.seasonal is not None:
            s = self.seasonal.period
            p += s - 1 if self.seasonal.variant == "running-sum" else s
        if self.cycle is not None:
            p += 2
        if self.ar is not None:
            p += self.ar.order
        return p

    # serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        out = {}
        for name in _SUBSPECS:
            sub = getattr(self, name)
            if sub is None:
                continue
            d = asdict(sub)
            for k, v in d.items():
                if v is None:
                    d[k] = ESTIMATE
                elif isinstance(v, tuple):
                    d[k] = list(v)
            out[name] = d
        out["obs_variance"] = ESTIMATE if self.obs_variance is None else self.obs_variance
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ComponentSpec":
        def clean(v):
            if isinstance(v, str) and v.strip().lower() == ESTIMATE:
                return None
            return v

        kwargs = {}
        for name, sub_cls in _SUBSPECS.items():
            if name not in d or d[name] in (None, False):
                kwargs[name] = None
                continue
            raw = {} if d[name] is True else dict(d[name])
            allowed = {f.name for f in fields(sub_cls)}
            unknown = set(raw) - allowed
            if unknown:
                raise ValueError(f"unknown keys for {name}: {sorted(unknown)}")
            sub = {k: clean(v) for k, v in raw.items()}
            if name == "ar" and sub.get("coefficients") is not None:
                sub["coefficients"] = tuple(sub["coefficients"])
            kwargs[name] = sub_cls(**sub)
        unknown = set(d) - set(_SUBSPECS) - {"obs_variance"}
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        kwargs["obs_variance"] = clean(d.get("obs_variance", ESTIMATE))
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateBlock:
    """One component as a state-space block.

    ``init_cov`` covers stationary states; ``diffuse`` is the pattern that gets
    multiplied by the diffuse scale for nonstationary ones.
    """

    name: str
    transition: np.ndarray
    state_cov: np.ndarray
    obs_row: np.ndarray
    init_cov: np.ndarray
    diffuse: np.ndarray
    noise_index: tuple

    @property
    def dim(self) -> int:
        return self.transition.shape[0]

    @property
    def n_diffuse(self) -> int:
        return int(np.linalg.matrix_rank(self.diffuse)) if self.diffuse.any() else 0


def build_trend_block(order: int, variance: float) -> StateBlock:
    if order not in (1, 2):
        raise ValueError(f"trend order must be 1 or 2, got {order}")
    if variance < 0:
        raise ValueError("trend variance must be >= 0")
    if order == 1:
        Phi = np.array([[1.0]])
    else:
        Phi = np.array([[1.0, 1.0], [0.0, 1.0]])
    Q = np.zeros((order, order))
    Q[-1, -1] = variance
    row = np.zeros(order)
    row[0] = 1.0
    return StateBlock("trend", Phi, Q, row, np.zeros((order, order)), np.eye(order),
                      (order - 1,))


def build_seasonal_block(variant: str, period: int, variance: float) -> StateBlock:
    """Dummy seasonal (running-sum constraint) or seasonal random walk (difference constraint).

    The running-sum block has ``period - 1`` states. The seasonal-difference
    block carries the last ``period`` seasonal values with an initial
    sum-to-zero constraint, so it has ``period - 1`` diffuse directions.
    """
    s = int(period)
    if s < 2:
        raise ValueError("seasonal period must be >= 2")
    if variance < 0:
        raise ValueError("seasonal variance must be >= 0")
    if variant == "running-sum":
        m = s - 1
        Phi = np.zeros((m, m))
        Phi[0, :] = -1.0
        Phi[1:, :-1] = np.eye(m - 1)
        diffuse = np.eye(m)
    elif variant == "seasonal-difference":
        m = s
        Phi = np.zeros((m, m))
        Phi[0, -1] = 1.0
        Phi[1:, :-1] = np.eye(m - 1)
        diffuse = np.eye(m) - np.full((m, m), 1.0 / m)
    else:
        raise ValueError(f"unknown seasonal variant {variant!r}")
    Q = np.zeros((m, m))
    Q[0, 0] = variance
    row = np.zeros(m)
    row[0] = 1.0
    return StateBlock("seasonal", Phi, Q, row, np.zeros((m, m)), diffuse, (0,))


def cycle_transition(rho: float, frequency: float) -> np.ndarray:
    c, s = np.cos(frequency), np.sin(frequency)
    return rho * np.array([[c, s], [-s, c]])


def build_cycle_block(rho: float, frequency: float, variance: float) -> StateBlock:
    if not 0.0 < rho <= 1.0:
        raise ValueError("cycle damping rho must lie in (0, 1]")
    if not 0.0 < frequency <= np.pi:
        raise ValueError("cycle frequency must lie in (0, pi]")
    if variance < 0:
        raise ValueError("cycle variance must be >= 0")
    Phi = cycle_transition(rho, frequency)
    Q = variance * np.eye(2)
    if rho < 1.0:
        init = variance / (1.0 - rho**2) * np.eye(2)
        diffuse = np.zeros((2, 2))
    else:
        init = np.zeros((2, 2))
        diffuse = np.eye(2)
    return StateBlock("cycle", Phi, Q, np.array([1.0, 0.0]), init, diffuse, (0, 1))


def build_ar_block(coefficients, variance: float) -> StateBlock:
    coefs = np.atleast_1d(np.asarray(coefficients, dtype=float))
    k = coefs.size
    if k not in (1, 2):
        raise ValueError("AR order must be 1 or 2")
    roots = np.roots(np.r_[1.0, -coefs])
    if np.any(np.abs(roots) >= 1.0):
        raise ValueError("AR block must be stationary")
    Phi = np.zeros((k, k))
    Phi[0] = coefs
    if k == 2:
        Phi[1, 0] = 1.0
    Q = np.zeros((k, k))
    Q[0, 0] = variance
    init = linalg.solve_discrete_lyapunov(Phi, Q)
    init = 0.5 * (init + init.T)
    row = np.zeros(k)
    row[0] = 1.0
    return StateBlock("ar", Phi, Q, row, init, np.zeros((k, k)), (0,))


def spec_blocks(spec: ComponentSpec) -> list[StateBlock]:
    if not spec.resolved:
        raise ValueError(f"spec has unresolved parameters: {spec.free_parameters()}")
    blocks = []
    if spec.trend is not None:
        blocks.append(build_trend_block(spec.trend.order, spec.trend.variance))
    if spec.seasonal is not None:
        s = spec.seasonal
        blocks.append(build_seasonal_block(s.variant, s.period, s.variance))
    if spec.cycle is not None:
        c = spec.cycle
        blocks.append(build_cycle_block(c.rho, c.frequency, c.variance))
    if spec.ar is not None:
        blocks.append(build_ar_block(spec.ar.coefficients, spec.ar.variance))
    return blocks


def block_layout(spec: ComponentSpec) -> dict[str, slice]:
    """State-vector slice of each component, in assembly order."""
    out, start = {}, 0
    for name, sub in (("trend", spec.trend), ("seasonal", spec.seasonal),
                      ("cycle", spec.cycle), ("ar", spec.ar)):
        if sub is None:
            continue
        if name == "trend":
            d = sub.order
        elif name == "seasonal":
            d = sub.period - 1 if sub.variant == "running-sum" else sub.period
        elif name == "cycle":
            d = 2
        else:
            d = sub.order
        out[name] = slice(start, start + d)
        start += d
    return out


def assemble_model(spec: ComponentSpec, data_variance: float = 1.0) -> StateSpaceModel:
    """Stack the component blocks into one univariate state-space model.

    Diffuse states get initial variance ``DIFFUSE_SCALE * data_variance``.
    """
    blocks = spec_blocks(spec)
    Phi = linalg.block_diag(*[b.transition for b in blocks])
    Q = linalg.block_diag(*[b.state_cov for b in blocks])
    init = linalg.block_diag(*[b.init_cov for b in blocks])
    diffuse = linalg.block_diag(*[b.diffuse for b in blocks])
    row = np.concatenate([b.obs_row for b in blocks])
    scale = DIFFUSE_SCALE * max(float(data_variance), 1e-300)
    return StateSpaceModel(row[None, :], Phi, Q, [[spec.obs_variance]],
                           np.zeros(Phi.shape[0]), init + scale * diffuse,
                           n_diffuse=sum(b.n_diffuse for b in blocks),
                           diffuse_cov=scale * diffuse)


# ---------------------------------------------------------------------------
# parameter transforms
# ---------------------------------------------------------------------------

def _logit(x):
    return np.log(x) - np.log1p(-x)


def _expit(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def ar_from_partials(partials) -> tuple:
    r = np.tanh(np.asarray(partials, dtype=float))
    if r.size == 1:
        return (float(r[0]),)
    return (float(r[0] * (1.0 - r[1])), float(r[1]))


def partials_from_ar(coefs) -> np.ndarray:
    coefs = np.asarray(coefs, dtype=float)
    if coefs.size == 1:
        r = coefs
    else:
        r2 = coefs[1]
        r = np.array([coefs[0] / (1.0 - r2), r2])
    return np.arctanh(np.clip(r, -0.999999, 0.999999))


class _Transform:
    """Maps the free parameters of a spec to and from an unconstrained vector."""

    def __init__(self, spec: ComponentSpec, data_variance: float):
        self.names = spec.free_parameters()
        self.spec = spec
        self.scale = data_variance

    def to_vector(self, values: dict) -> np.ndarray:
        out = []
        for name in self.names:
            v = values[name]
            if name.endswith("variance"):
                out.append(np.log(max(v, 1e-300) / self.scale))
            elif name == "cycle.rho":
                out.append(_logit(min(max(v, 1e-9), 1 - 1e-9)))
            elif name == "cycle.frequency":
                out.append(_logit(min(max(v / np.pi, 1e-9), 1 - 1e-9)))
            elif name == "ar.coefficients":
                out.extend(partials_from_ar(v))
        return np.array(out, dtype=float)

    def to_values(self, theta) -> dict:
        out, i = {}, 0
        for name in self.names:
            if name.endswith("variance"):
                out[name] = float(self.scale * np.exp(np.clip(theta[i], -700, 700)))
                i += 1
            elif name == "cycle.rho":
                out[name] = float(_expit(theta[i]))
                i += 1
            elif name == "cycle.frequency":
                out[name] = float(np.pi * _expit(theta[i]))
                i += 1
            elif name == "ar.coefficients":
                k = self.spec.ar.order
                out[name] = ar_from_partials(theta[i:i + k])
                i += k
        return out


# ---------------------------------------------------------------------------
# EM on the variances
# ---------------------------------------------------------------------------

def _variance_targets(spec: ComponentSpec, names) -> dict[str, list[int]]:
    """State indices whose disturbance variance each variance parameter sets."""
    layout = block_layout(spec)
    targets = {}
    for name in names:
        if name == "obs_variance" or not name.endswith("variance"):
            continue
        comp = name.split(".")[0]
        start = layout[comp].start
        if comp == "trend":
            targets[name] = [start + spec.trend.order - 1]
        elif comp == "cycle":
            targets[name] = [start, start + 1]
        else:
            targets[name] = [start]
    return targets


def _unit_stationary_cov(spec: ComponentSpec, comp: str):
    """Initial covariance of a stationary block at unit disturbance variance, else None."""
    if comp == "cycle" and spec.cycle.rho < 1.0:
        return build_cycle_block(spec.cycle.rho, spec.cycle.frequency, 1.0).init_cov
    if comp == "ar":
        return build_ar_block(spec.ar.coefficients, 1.0).init_cov
    return None


def em_step(spec: ComponentSpec, y: np.ndarray, data_variance: float,
            estimate: list[str]):
    """One EM iteration for the variance parameters named in ``estimate``.

    Returns ``(new_spec, full_loglik_before_update)``; the full
    log-likelihood includes the diffuse start-up terms because that is the
    quantity EM increases.
    """
    model = assemble_model(spec, data_variance)
    sm = kalman_smoother(model, y)
    x, P, lag = sm.smoothed_means, sm.smoothed_covs, sm.lag1_cross_covs
    x_prev = np.vstack([sm.initial_mean[None, :], x[:-1]])
    P_prev = np.concatenate([sm.initial_cov[None], P[:-1]])
    Phi = model.transition
    S11 = P.sum(0) + x.T @ x
    S10 = lag.sum(0) + x.T @ x_prev
    S00 = P_prev.sum(0) + x_prev.T @ x_prev
    T = x.shape[0]
    W = (S11 - S10 @ Phi.T - Phi @ S10.T + Phi @ S00 @ Phi.T) / T
    S_init = sm.initial_cov + np.outer(sm.initial_mean, sm.initial_mean)
    layout = block_layout(spec)
    updates = {}
    for name, idx in _variance_targets(spec, estimate).items():
        total = T * float(np.sum(np.diag(W)[idx]))
        count = T * len(idx)
        comp = name.split(".")[0]
        unit_init = _unit_stationary_cov(spec, comp)
        if unit_init is not None:
            # stationary blocks start from variance * unit_init, which adds
            # the initial state to the complete-data likelihood
            blk = layout[comp]
            total += float(np.trace(np.linalg.solve(unit_init, S_init[blk, blk])))
            count += unit_init.shape[0]
        updates[name] = max(total / count, 0.0)
    if "obs_variance" in estimate:
        a = model.obs_map[0]
        obs = ~np.isnan(y)
        resid = y[obs] - x[obs] @ a
        spread = np.einsum("i,tij,j->t", a, P[obs], a)
        updates["obs_variance"] = max(float(np.mean(resid**2 + spread)), 0.0)
    return spec.with_values(updates), sm.filter.full_log_likelihood


def run_em(spec: ComponentSpec, y, n_iter: int, data_variance: float | None = None,
           estimate: list[str] | None = None):
    """Iterate :func:`em_step`; returns the final spec and the log-likelihood trace.

    ``trace[k]`` is the full log-likelihood at the parameters entering
    iteration k, with one extra entry for the final parameters.
    """
    y = _as_array(y)
    if data_variance is None:
        data_variance = float(np.nanvar(y))
    if estimate is None:
        estimate = [n for n in spec.parameter_names() if n.endswith("variance")]
    trace = []
    for _ in range(n_iter):
        spec, ll = em_step(spec, y, data_variance, estimate)
        trace.append(ll)
    trace.append(kalman_filter(assemble_model(spec, data_variance), y).full_log_likelihood)
    return spec, np.array(trace)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitConfig:
    em_iterations: int = 25
    max_iter: int = 500
    rtol: float = 1e-9
    n_frequency_starts: int = 8
    min_period_months: float = 18.0
    rho_start: float = 0.9
    workers: int = 1


@dataclass(frozen=True)
class DecompositionResult:
    """Smoothed components of one series at the fitted parameters.

    ``irregular_path`` holds the stationary autoregressive part (zero when no
    AR block is present); ``obs_error_path`` is the smoothed observation error.
    """

    series: TimeSeries
    trend_path: TimeSeries
    seasonal_path: TimeSeries
    cycle_path: TimeSeries
    irregular_path: TimeSeries
    obs_error_path: TimeSeries
    path_variances: dict
    fitted_spec: ComponentSpec
    log_likelihood: float
    n_params: int
    n_effective: int
    aic: float
    bic: float
    residual_diagnostics: dict
    converged: bool = True
    n_iterations: int = 0

    @property
    def has_cycle(self) -> bool:
        return self.fitted_spec.cycle is not None

    @property
    def signal(self) -> np.ndarray:
        return (self.trend_path.values + self.seasonal_path.values
                + self.cycle_path.values + self.irregular_path.values)

    def cycle_period(self) -> float | None:
        """Cycle period in months, if a cycle is present."""
        if self.fitted_spec.cycle is None:
            return None
        return 2 * np.pi / self.fitted_spec.cycle.frequency * self.series.step

    def to_dict(self) -> dict:
        return {
            "name": self.series.name,
            "start": self.series.start,
            "step": self.series.step,
            "fitted_spec": self.fitted_spec.to_dict(),
            "log_likelihood": self.log_likelihood,
            "n_params": self.n_params,
            "n_effective": self.n_effective,
            "aic": self.aic,
            "bic": self.bic,
            "converged": self.converged,
            "n_iterations": self.n_iterations,
            "cycle_period_months": self.cycle_period(),
            "residual_diagnostics": self.residual_diagnostics,
        }


def information_criteria(loglik: float, n_params: int, n_effective: int):
    aic = -2.0 * loglik + 2.0 * n_params
    bic = -2.0 * loglik + n_params * float(np.log(n_effective))
    return aic, bic


def ljung_box(resid, lags: int):
    r = np.asarray(resid, dtype=float)
    r = r[np.isfinite(r)]
    n = r.size
    r = r - r.mean()
    denom = r @ r
    acf = np.array([r[k:] @ r[:-k] / denom for k in range(1, lags + 1)])
    stat = n * (n + 2) * np.sum(acf**2 / (n - np.arange(1, lags + 1)))
    return float(stat), float(stats.chi2.sf(stat, lags))


def residual_diagnostics(filtered, lags: int | None = None) -> dict:
    """Ljung-Box and Jarque-Bera tests on standardized one-step innovations."""
    v = filtered.innovations[:, 0]
    F = filtered.innovation_covs[:, 0, 0]
    obs = np.flatnonzero(np.isfinite(v))[filtered.n_excluded:]
    z = v[obs] / np.sqrt(F[obs])
    if lags is None:
        lags = int(max(1, min(24, z.size // 5)))
    lb, lb_p = ljung_box(z, lags)
    jb = stats.jarque_bera(z)
    return {"ljung_box": lb, "ljung_box_pvalue": lb_p, "ljung_box_lags": lags,
            "jarque_bera": float(jb.statistic), "jarque_bera_pvalue": float(jb.pvalue)}


def _as_array(y) -> np.ndarray:
    if isinstance(y, TimeSeries):
        return np.array(y.values, dtype=float)
    arr = np.asarray(y, dtype=float)
    if arr.ndim != 1:
        raise ValueError("structural models take a univariate series")
    return arr


def _as_series(y) -> TimeSeries:
    return y if isinstance(y, TimeSeries) else TimeSeries(np.asarray(y, dtype=float))


def _initial_values(spec: ComponentSpec, var: float) -> dict:
    guess = {
        "obs_variance": 0.3 * var,
        "seasonal.variance": 1e-3 * var,
        "cycle.variance": 0.1 * var,
        "ar.variance": 0.1 * var,
        "ar.coefficients": (0.5,) if spec.ar is not None and spec.ar.order == 1 else (0.5, 0.0),
    }
    if spec.trend is not None:
        guess["trend.variance"] = (0.05 if spec.trend.order == 1 else 1e-3) * var
    return {n: guess[n] for n in spec.free_parameters() if n in guess}


def _frequency_starts(spec: ComponentSpec, T: int, step: int, config: FitConfig):
    if spec.cycle is None or spec.cycle.frequency is not None:
        return [None]
    lo = max(config.min_period_months / step, 2.0)
    hi = max(T / 3.0, lo * 1.01)
    periods = np.geomspace(lo, hi, config.n_frequency_starts)
    return [float(min(2 * np.pi / per, np.pi)) for per in periods]


def fit_mle(spec: ComponentSpec, y, config: FitConfig | None = None) -> DecompositionResult:
    """Estimate the free parameters of ``spec`` by maximum likelihood.

    Raises :class:`FitError` when the likelihood is not finite at every
    starting point (rescale the data) or the series is too short.
    """
    config = config or FitConfig()
    series = _as_series(y)
    yv = np.array(series.values, dtype=float)
    T = yv.size
    if T < 4 * spec.state_dim:
        raise FitError(f"series of length {T} is too short for a model with "
                       f"{spec.state_dim} states (need >= {4 * spec.state_dim})")
    var = float(np.nanvar(yv))
    if not np.isfinite(var):
        raise FitError("series variance is not finite; try rescaling the series")
    if var <= 0:
        raise FitError("series has no variation")
    free = spec.free_parameters()
    variance_free = [n for n in free if n.endswith("variance")]

    # warm starts: EM on the variances with rho/frequency/AR held at start values
    base = _initial_values(spec, var)
    candidates = []
    for lam in _frequency_starts(spec, T, series.step, config):
        start = dict(base)
        if "cycle.rho" in free:
            start["cycle.rho"] = config.rho_start
        if lam is not None:
            start["cycle.frequency"] = lam
        trial = spec.with_values(start)
        try:
            if variance_free and config.em_iterations > 0:
                trial, _ = run_em(trial, yv, config.em_iterations, var, variance_free)
            ll = log_likelihood(assemble_model(trial, var), yv)
        except (SingularInnovationError, np.linalg.LinAlgError, ValueError) as err:
            logger.debug("start %s failed: %s", lam, err)
            continue
        if np.isfinite(ll):
            candidates.append((ll, trial))
    if not candidates:
        raise FitError("log-likelihood is not finite at any starting point; "
                       "try rescaling the series")
    best_ll, best = max(candidates, key=lambda c: c[0])

    converged, n_iter = True, 0
    if free:
        tr = _Transform(spec, var)
        theta0 = tr.to_vector({n: best.get(n) for n in free})

        def objective(theta):
            try:
                model = assemble_model(spec.with_values(tr.to_values(theta)), var)
                ll = log_likelihood(model, yv)
            except (SingularInnovationError, np.linalg.LinAlgError, ValueError):
                return np.inf
            return -ll if np.isfinite(ll) else np.inf

        f0 = objective(theta0)
        res = optimize.minimize(objective, theta0, method="Nelder-Mead",
                                options={"maxiter": config.max_iter, "xatol": 1e-6,
                                         "fatol": config.rtol * max(abs(f0), 1.0),
                                         "adaptive": len(theta0) > 4})
        n_iter = int(res.nit)
        converged = bool(res.success)
        if np.isfinite(res.fun) and res.fun <= f0:
            best = spec.with_values(tr.to_values(res.x))
        else:
            converged = False
        if not converged:
            warnings.warn(f"optimizer stopped without converging after {n_iter} iterations; "
                          "returning the best parameters found", RuntimeWarning, stacklevel=2)
    return decompose(best, series, n_params=spec.n_free, converged=converged,
                     n_iterations=n_iter)


def decompose(spec: ComponentSpec, y, n_params: int = 0, converged: bool = True,
              n_iterations: int = 0) -> DecompositionResult:
    """Smoothed component paths for a fully specified model."""
    series = _as_series(y)
    yv = np.array(series.values, dtype=float)
    var = float(np.nanvar(yv))
    model = assemble_model(spec, var)
    sm = kalman_smoother(model, yv)
    layout = block_layout(spec)
    x, P = sm.smoothed_means, sm.smoothed_covs
    T = yv.size
    paths, variances = {}, {}
    for comp in ("trend", "seasonal", "cycle", "ar"):
        if comp in layout:
            i = layout[comp].start
            paths[comp] = x[:, i].copy()
            variances[comp] = P[:, i, i].copy()
        else:
            paths[comp] = np.zeros(T)
            variances[comp] = np.zeros(T)
    a = model.obs_map[0]
    signal = x @ a
    paths["obs_error"] = yv - signal
    variances["signal"] = np.einsum("i,tij,j->t", a, P, a)
    filt = sm.filter
    n_eff = filt.effective_nobs
    aic, bic = information_criteria(filt.log_likelihood, n_params, n_eff)
    mk = lambda key, label: series.with_values(paths[key], name=f"{series.name}{label}")
    return DecompositionResult(
        series=series,
        trend_path=mk("trend", ":trend"),
        seasonal_path=mk("seasonal", ":seasonal"),
        cycle_path=mk("cycle", ":cycle"),
        irregular_path=mk("ar", ":irregular"),
        obs_error_path=mk("obs_error", ":obs_error"),
        path_variances={("irregular" if k == "ar" else k): v for k, v in variances.items()},
        fitted_spec=spec,
        log_likelihood=filt.log_likelihood,
        n_params=n_params,
        n_effective=n_eff,
        aic=aic,
        bic=bic,
        residual_diagnostics=residual_diagnostics(filt),
        converged=converged,
        n_iterations=n_iterations,
    )


@dataclass(frozen=True)
class RankedFit:
    rank: int
    spec: ComponentSpec
    result: DecompositionResult
    score: float


def select_model(specs, y, criterion: str = "aic", config: FitConfig | None = None):
    """Fit every candidate and rank by AIC or BIC (ties go to fewer parameters)."""
    if criterion not in ("aic", "bic"):
        raise ValueError("criterion must be 'aic' or 'bic'")
    specs = list(specs)
    if not specs:
        raise ValueError("no candidate specs")
    config = config or FitConfig()

    def attempt(spec):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                return fit_mle(spec, y, config)
        except (FitError, SingularInnovationError, np.linalg.LinAlgError) as err:
            return err

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            outcomes = list(pool.map(attempt, specs))
    else:
        outcomes = [attempt(s) for s in specs]
    fitted = []
    for spec, out in zip(specs, outcomes):
        if isinstance(out, Exception):
            warnings.warn(f"candidate {spec.to_dict()} failed and was excluded: {out}",
                          RuntimeWarning, stacklevel=2)
            continue
        fitted.append((getattr(out, criterion), out.n_params, spec, out))
    if not fitted:
        raise FitError("every candidate model failed to fit")
    fitted.sort(key=lambda f: (f[0], f[1]))
    return [RankedFit(i + 1, spec, res, float(score)) for i, (score, _, spec, res) in enumerate(fitted)]
