"""Linear Gaussian state-space models.

The model is

    y(t) = A(t) x(t) + v(t),      v ~ N(0, R)
    x(t) = Phi x(t-1) + w(t),     w ~ N(0, Q)
    x(0) ~ N(mu, Sigma)

with t = 1..T. Missing observations (NaN) skip the update step. Diffuse
initial states are approximated by a large initial variance; the first
``n_diffuse`` observed steps are left out of the reported log-likelihood so
that models with different numbers of nonstationary states compare fairly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .timeseries import as_observations

DIFFUSE_SCALE = 1e7
SYMMETRY_TOL = 1e-10


class SingularInnovationError(np.linalg.LinAlgError):
    """Raised when an innovation covariance is singular at some time step."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"innovation covariance is singular (condition number > "
                         f"{_kernels.MAX_COND:g}) at time step {step}")


def _check_psd(name, M, scale=None):
    if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max(initial=0.0))):
        raise ValueError(f"{name} is not symmetric")
    if M.size == 0:
        return
    tr = np.trace(M) if scale is None else scale
    lo = np.linalg.eigvalsh(0.5 * (M + M.T)).min()
    if lo < -1e-10 * max(abs(tr), 1e-300):
        raise ValueError(f"{name} is not positive semidefinite (min eigenvalue {lo:.3g})")


@dataclass(frozen=True)
class StateSpaceModel:
    """System matrices of a linear Gaussian state-space model.

    ``obs_map`` is either ``(q, p)`` or time-varying ``(T, q, p)``.
    ``init_cov`` is the full initial covariance; ``diffuse_cov`` marks the
    part of it that is a large-variance stand-in for diffuse states (zero by
    default). The filter keeps the two parts apart internally, which avoids
    cancelling large numbers; results are those of the full ``init_cov``.
    """

    obs_map: np.ndarray
    transition: np.ndarray
    state_cov: np.ndarray
    obs_cov: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray
    n_diffuse: int = 0
    diffuse_cov: np.ndarray | None = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.obs_map, dtype=float))
        Phi = np.atleast_2d(np.asarray(self.transition, dtype=float))
        Q = np.atleast_2d(np.asarray(self.state_cov, dtype=float))
        R = np.atleast_2d(np.asarray(self.obs_cov, dtype=float))
        mu = np.atleast_1d(np.asarray(self.init_mean, dtype=float))
        Sigma = np.atleast_2d(np.asarray(self.init_cov, dtype=float))
        p = Phi.shape[0]
        q = A.shape[-2]
        if Phi.shape != (p, p):
            raise ValueError("transition must be square")
        if A.shape[-1] != p or A.ndim not in (2, 3):
            raise ValueError(f"obs_map shape {A.shape} inconsistent with state_dim {p}")
        if Q.shape != (p, p) or Sigma.shape != (p, p) or mu.shape != (p,):
            raise ValueError("state_cov, init_cov and init_mean must match state_dim")
        if R.shape != (q, q):
            raise ValueError("obs_cov must be q x q")
        for name, M in (("state_cov", Q), ("obs_cov", R), ("init_cov", Sigma)):
            _check_psd(name, M)
        if not 0 <= int(self.n_diffuse) <= p:
            raise ValueError("n_diffuse must lie in [0, state_dim]")
        if self.diffuse_cov is None:
            D = np.zeros((p, p))
        else:
            D = np.atleast_2d(np.asarray(self.diffuse_cov, dtype=float))
            if D.shape != (p, p):
                raise ValueError("diffuse_cov must match state_dim")
            _check_psd("diffuse_cov", D)
            _check_psd("init_cov - diffuse_cov", Sigma - D, scale=np.trace(Sigma))
        for name, val in (("obs_map", A), ("transition", Phi), ("state_cov", Q),
                          ("obs_cov", R), ("init_mean", mu), ("init_cov", Sigma),
                          ("diffuse_cov", D)):
            val = np.ascontiguousarray(val)
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "n_diffuse", int(self.n_diffuse))

    @property
    def state_dim(self) -> int:
        return self.transition.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.obs_map.shape[-2]

    @property
    def time_varying(self) -> bool:
        return self.obs_map.ndim == 3

    def obs_map_sequence(self, T: int) -> np.ndarray:
        """``A(t)`` for t = 1..T as a contiguous ``(T, q, p)`` array."""
        if self.time_varying:
            if self.obs_map.shape[0] != T:
                raise ValueError(f"time-varying obs_map has {self.obs_map.shape[0]} "
                                 f"entries but the series has {T}")
            return self.obs_map
        return np.ascontiguousarray(np.broadcast_to(self.obs_map, (T,) + self.obs_map.shape))

    @property
    def finite_init_cov(self) -> np.ndarray:
        """``init_cov`` without the diffuse stand-in."""
        return self.init_cov - self.diffuse_cov

    def replace(self, **changes) -> "StateSpaceModel":
        """Copy with some fields changed.

        A new ``init_cov`` without a new ``diffuse_cov`` drops the diffuse
        marking (and ``n_diffuse``), since the old split no longer applies.
        """
        fields = dict(obs_map=self.obs_map, transition=self.transition,
                      state_cov=self.state_cov, obs_cov=self.obs_cov,
                      init_mean=self.init_mean, init_cov=self.init_cov,
                      n_diffuse=self.n_diffuse, diffuse_cov=self.diffuse_cov)
        if "init_cov" in changes and "diffuse_cov" not in changes:
            fields["diffuse_cov"] = None
            fields["n_diffuse"] = 0
        fields.update(changes)
        return StateSpaceModel(**fields)


@dataclass(frozen=True)
class FilterResult:
    predicted_means: np.ndarray
    predicted_covs: np.ndarray
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    innovations: np.ndarray
    innovation_covs: np.ndarray
    loglik_terms: np.ndarray
    n_observed: np.ndarray
    log_likelihood: float
    full_log_likelihood: float
    n_excluded: int

    @property
    def effective_nobs(self) -> int:
        """Observed time steps that contribute to ``log_likelihood``."""
        return int((self.n_observed > 0).sum()) - self.n_excluded


@dataclass(frozen=True)
class SmootherResult:
    smoothed_means: np.ndarray
    smoothed_covs: np.ndarray
    lag1_cross_covs: np.ndarray
    initial_mean: np.ndarray
    initial_cov: np.ndarray
    filter: FilterResult


def _prepare(model: StateSpaceModel, y):
    obs = as_observations(y)
    if obs.shape[1] != model.obs_dim:
        raise ValueError(f"observations have dimension {obs.shape[1]}, model expects "
                         f"{model.obs_dim}")
    if obs.shape[0] < 1:
        raise ValueError("empty series")
    A = model.obs_map_sequence(obs.shape[0])
    return np.ascontiguousarray(obs), A


def _excluded_loglik(ll_terms, n_obs, n_diffuse):
    observed = np.flatnonzero(n_obs > 0)
    skip = observed[:n_diffuse]
    return float(ll_terms.sum() - ll_terms[skip].sum()), len(skip)


def _univariate(model: StateSpaceModel):
    return model.obs_dim == 1


def _split_args(model: StateSpaceModel):
    D = model.diffuse_cov
    tol = 1e-9 * float(np.abs(np.diag(D)).max(initial=0.0))
    return model.finite_init_cov, D, tol


def kalman_filter(model: StateSpaceModel, y) -> FilterResult:
    """Run the Kalman filter over ``y`` (TimeSeries, ``(T,)`` or ``(T, q)``; NaN = missing)."""
    obs, A = _prepare(model, y)
    if _univariate(model):
        (a_pred, P_pred, a_filt, P_filt, v, F, ll, n_obs,
         status) = _kernels.uni_filter_loop(obs[:, 0].copy(), np.ascontiguousarray(A[:, 0, :]),
                                            model.transition, model.state_cov,
                                            float(model.obs_cov[0, 0]), model.init_mean,
                                            *_split_args(model))
        v = v[:, None]
        F = F[:, None, None]
    else:
        (a_pred, P_pred, a_filt, P_filt, v, F, ll, n_obs,
         status) = _kernels.kalman_filter_loop(obs, A, model.transition, model.state_cov,
                                               model.obs_cov, model.init_mean, model.init_cov)
    if status >= 0:
        raise SingularInnovationError(int(status))
    loglik, n_excl = _excluded_loglik(ll, n_obs, model.n_diffuse)
    return FilterResult(a_pred, P_pred, a_filt, P_filt, v, F, ll, n_obs,
                        loglik, float(ll.sum()), n_excl)


def kalman_smoother(model: StateSpaceModel, y, filtered: FilterResult | None = None) -> SmootherResult:
    """Fixed-interval smoother with lag-one cross-covariances and the smoothed x(0)."""
    if filtered is None:
        filtered = kalman_filter(model, y)
    a_s, P_s, lag1, a0, P0 = _kernels.smoother_loop(
        model.transition, model.state_cov, model.init_mean, model.init_cov,
        filtered.predicted_means, filtered.predicted_covs, filtered.filtered_means,
        filtered.filtered_covs)
    return SmootherResult(a_s, P_s, lag1, a0, P0, filtered)


def log_likelihood(model: StateSpaceModel, y) -> float:
    """Prediction-error-decomposition log-likelihood (diffuse steps excluded)."""
    obs, A = _prepare(model, y)
    if _univariate(model):
        val = _kernels.uni_loglik_loop(obs[:, 0].copy(), np.ascontiguousarray(A[:, 0, :]),
                                       model.transition, model.state_cov,
                                       float(model.obs_cov[0, 0]), model.init_mean,
                                       *_split_args(model), model.n_diffuse)
    else:
        val = _kernels.kalman_loglik_loop(obs, A, model.transition, model.state_cov,
                                          model.obs_cov, model.init_mean, model.init_cov,
                                          model.n_diffuse)
    if not np.isfinite(val):
        # rerun the storing filter to locate the offending step
        kalman_filter(model, obs)
    return float(val)


def _psd_factor(M):
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate(model: StateSpaceModel, length: int, seed: int | None = None,
             init_state=None):
    """Draw ``(states, observations)`` of shapes ``(length, p)`` and ``(length, q)``.

    ``x(0)`` is drawn from N(mu, Sigma) unless ``init_state`` is given.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    p, q = model.state_dim, model.obs_dim
    A = model.obs_map_sequence(length)
    z0 = rng.standard_normal(p)
    if init_state is None:
        x = model.init_mean + _psd_factor(model.init_cov) @ z0
    else:
        x = np.asarray(init_state, dtype=float).reshape(p)
    W = rng.standard_normal((length, p)) @ _psd_factor(model.state_cov).T
    V = rng.standard_normal((length, q)) @ _psd_factor(model.obs_cov).T
    Phi = model.transition
    states = np.empty((length, p))
    for t in range(length):
        x = Phi @ x + W[t]
        states[t] = x
    obs = np.einsum("tqp,tp->tq", A, states) + V
    return states, obs
