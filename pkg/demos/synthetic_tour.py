"""Tour of the method stack on simulated data (no downloads needed).

    python demos/synthetic_tour.py

1. Decompose a trend + cycle + noise series and read off the cycle period.
2. Fit a two-regime AR(2) to a simulated index and classify its regimes.
3. Extract common trends from a planted two-factor panel and rebuild one
   series from the first k factors.
4. Find the spectral peaks of a common factor.
"""

import warnings

import numpy as np

from ssdecomp.factors import Panel, correlation_map, identify_common_factors, reconstruct
from ssdecomp.regime import MsarConfig, MsarSpec, fit_msar, simulate_msar
from ssdecomp.spectral import cycle_period, find_peaks, periodogram
from ssdecomp.ssm import simulate
from ssdecomp.structural import (ComponentSpec, CycleSpec, TrendSpec, assemble_model, fit_mle,
                                 select_model)
from ssdecomp.timeseries import TimeSeries

warnings.simplefilter("ignore", RuntimeWarning)

# 1. structural decomposition -------------------------------------------------
truth = ComponentSpec(trend=TrendSpec(1, 0.01), cycle=CycleSpec(0.95, 2 * np.pi / 43.44, 0.5),
                      obs_variance=0.25)
v = 0.5 / (1 - 0.95**2)
model = assemble_model(truth).replace(init_cov=np.diag([0.0, v, v]))
_, y = simulate(model, 1200, seed=1)
series = TimeSeries(y[:, 0], "1900-01", name="synthetic")
ranked = select_model([ComponentSpec(trend=TrendSpec(1)),
                       ComponentSpec(trend=TrendSpec(1), cycle=CycleSpec())], series, "aic")
for fit in ranked:
    print(f"rank {fit.rank}: cycle={fit.spec.cycle is not None} AIC={fit.score:.1f}")
best = ranked[0].result
lam = best.fitted_spec.cycle.frequency
print(f"cycle period {cycle_period(lam):.2f} months = {cycle_period(lam) / 12:.2f} years "
      f"(planted 43.44 months), damping {best.fitted_spec.cycle.rho:.3f}")

# 2. regime switching ------------------------------------------------------------
spec = MsarSpec((0.5, -0.5), ((0.5, 0.0), (0.4, 0.1)), (0.1, 0.1), ((0.97, 0.03), (0.03, 0.97)))
idx, regimes = simulate_msar(spec, 600, seed=2)
res = fit_msar(TimeSeries(idx, "1950-01", name="index"), MsarConfig(n_starts=4, seed=0))
print(f"regime means High {res.spec.means[0]:.3f} Low {res.spec.means[1]:.3f}; "
      f"staying probabilities {res.spec.transition[0][0]:.3f} / {res.spec.transition[1][1]:.3f}; "
      f"accuracy {np.mean(res.classify() == regimes):.3f}")

# 3. common trends -----------------------------------------------------------------
rng = np.random.default_rng(3)
T, q = 1200, 20
f = np.cumsum(np.cumsum(rng.standard_normal((2, T)), axis=1), axis=1)
S = rng.standard_normal((q, 2)) @ f
Y = S + rng.standard_normal((q, T)) * S.std(axis=1, keepdims=True) / 10
panel = Panel.from_arrays(Y, names=[f"box{k}" for k in range(q)])
common = identify_common_factors(panel)
print(f"selected order {common.order}; leading canonical correlations "
      f"{np.round(common.singular_values[:4], 3)}")
r = correlation_map(panel, common.factor_paths[0]).values
print(f"correlation of each series with factor 1: min |r| {np.nanmin(np.abs(r)):.3f}")
rep = reconstruct(common, panel, 0)
for row in rep.to_rows():
    print(f"  box0 from {row['k']} factor(s): R2 {row['r2']:.4f}")

# 4. spectrum of a factor ----------------------------------------------------------------
sup = common.support
spec1 = periodogram(TimeSeries(common.factor_paths[0, sup], "1900-01"), detrend=True)
for p in find_peaks(spec1, 3):
    print(f"  factor 1 peak at {p.period / 12:.1f} years, power {p.power:.3g}")
