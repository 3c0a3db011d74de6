import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssdecomp.ssm import (DIFFUSE_SCALE, SingularInnovationError, StateSpaceModel,
                          kalman_filter, kalman_smoother, log_likelihood, simulate)
from ssdecomp.timeseries import TimeSeries

from oracles import dense_blocks, dense_posterior, random_stable_model

HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def pinned_scalar():
    return StateSpaceModel([[1.0]], [[1.0]], [[0.0]], [[1.0]], [0.0], [[0.0]])


def local_level(y, Q=0.0, R=1.0):
    var = np.nanvar(y)
    return StateSpaceModel([[1.0]], [[1.0]], [[Q]], [[R]], [0.0],
                           [[DIFFUSE_SCALE * var]], n_diffuse=1)


def test_zero_gain_pins_state():
    y = np.array([3.0, -1.0, 7.5, 2.0])
    res = kalman_filter(pinned_scalar(), y)
    assert np.all(res.filtered_means == 0.0)


@pytest.mark.parametrize("y, expected, rounded", [
    ([0.0], -HALF_LOG_2PI, -0.918939),
    ([1.0], -HALF_LOG_2PI - 0.5, -1.418939),
    ([0.0, 0.0], -2 * HALF_LOG_2PI, 2 * -0.918939),
])
def test_loglik_standard_normal(y, expected, rounded):
    assert log_likelihood(pinned_scalar(), y) == pytest.approx(expected, abs=1e-12)
    assert kalman_filter(pinned_scalar(), y).log_likelihood == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(rounded, abs=2e-6)


def test_local_level_running_mean():
    rng = np.random.default_rng(3)
    y = rng.normal(2.0, 1.5, size=10)
    model = local_level(y)
    res = kalman_filter(model, y)
    running = np.cumsum(y) / np.arange(1, 11)
    # diffuse surrogate leaves an O(1/DIFFUSE_SCALE) bias
    np.testing.assert_allclose(res.filtered_means[:, 0], running, atol=1e-6)
    # exact posterior under the finite surrogate prior N(0, D)
    D = model.init_cov[0, 0]
    exact = np.cumsum(y) / (np.arange(1, 11) + 1.0 / D)
    np.testing.assert_allclose(res.filtered_means[:, 0], exact, atol=1e-12)
    # dense conditioning with a 1e7 prior variance is itself only good to ~1e-8
    for t in range(1, 11):
        m, _, _ = dense_posterior(model, y[:t, None])
        assert res.filtered_means[t - 1, 0] == pytest.approx(m[t, 0], abs=1e-6)


def test_local_level_smoother_is_sample_mean():
    rng = np.random.default_rng(4)
    y = rng.normal(-1.0, 0.7, size=10)
    sm = kalman_smoother(local_level(y), y)
    np.testing.assert_allclose(sm.smoothed_means[:, 0], y.mean(), atol=1e-6)
    assert np.ptp(sm.smoothed_means[:, 0]) < 1e-9


def test_smoother_single_step_equals_filter():
    rng = np.random.default_rng(5)
    model = random_stable_model(rng, p=3, q=2)
    y = rng.standard_normal((1, 2))
    sm = kalman_smoother(model, y)
    np.testing.assert_array_equal(sm.smoothed_means, sm.filter.filtered_means)
    np.testing.assert_array_equal(sm.smoothed_covs, sm.filter.filtered_covs)


def check_against_dense(model, y, tol=1e-8):
    T = y.shape[0]
    p = model.state_dim
    sm = kalman_smoother(model, y)
    mean, cov, ll = dense_posterior(model, y)
    np.testing.assert_allclose(sm.smoothed_means, mean[1:], atol=tol, rtol=0)
    np.testing.assert_allclose(sm.initial_mean, mean[0], atol=tol, rtol=0)
    for t in range(T):
        np.testing.assert_allclose(sm.smoothed_covs[t], dense_blocks(cov, p, t + 1, t + 1),
                                   atol=tol, rtol=0)
        np.testing.assert_allclose(sm.lag1_cross_covs[t], dense_blocks(cov, p, t + 1, t),
                                   atol=tol, rtol=0)
    assert sm.filter.log_likelihood == pytest.approx(ll, abs=tol)
    assert log_likelihood(model, y) == pytest.approx(ll, abs=tol)
    for t in (0, T // 2, T - 1):
        head = model.replace(obs_map=model.obs_map[:t + 1]) if model.time_varying else model
        m_t, _, _ = dense_posterior(head, y[:t + 1])
        np.testing.assert_allclose(sm.filter.filtered_means[t], m_t[t + 1], atol=tol, rtol=0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), T=st.integers(1, 20))
def test_dense_oracle_random_systems(seed, T):
    rng = np.random.default_rng(seed)
    model = random_stable_model(rng)
    _, y = simulate(model, T, seed=seed + 1)
    check_against_dense(model, y)


def test_dense_oracle_with_missing_entries():
    rng = np.random.default_rng(11)
    model = random_stable_model(rng, p=3, q=3)
    _, y = simulate(model, 15, seed=2)
    y[2, :] = np.nan
    y[5, 1] = np.nan
    y[9, [0, 2]] = np.nan
    check_against_dense(model, y)


def test_dense_oracle_time_varying_obs_map():
    rng = np.random.default_rng(12)
    model = random_stable_model(rng, p=2, q=2, time_varying=True, T=12)
    _, y = simulate(model, 12, seed=3)
    check_against_dense(model, y)


def test_missing_step_is_prediction_only():
    rng = np.random.default_rng(13)
    model = random_stable_model(rng, p=2, q=1)
    _, y = simulate(model, 8, seed=1)
    y[4] = np.nan
    res = kalman_filter(model, y)
    np.testing.assert_array_equal(res.filtered_means[4], res.predicted_means[4])
    assert res.loglik_terms[4] == 0.0
    assert np.isnan(res.innovations[4]).all()


def test_no_missing_mask_matches_plain_array():
    rng = np.random.default_rng(14)
    model = random_stable_model(rng, p=2, q=1)
    _, y = simulate(model, 30, seed=1)
    a = kalman_filter(model, y[:, 0])
    b = kalman_filter(model, TimeSeries(y[:, 0], missing=np.zeros(30, bool)))
    np.testing.assert_array_equal(a.filtered_means, b.filtered_means)
    assert a.log_likelihood == b.log_likelihood


def test_covariances_symmetric():
    rng = np.random.default_rng(15)
    model = random_stable_model(rng, p=4, q=3)
    _, y = simulate(model, 40, seed=9)
    sm = kalman_smoother(model, y)
    for arr in (sm.filter.predicted_covs, sm.filter.filtered_covs, sm.smoothed_covs):
        assert np.abs(arr - arr.transpose(0, 2, 1)).max() < 1e-10


@pytest.mark.parametrize("c", [2.5, -0.3])
def test_loglik_rescaling_jacobian(c):
    rng = np.random.default_rng(16)
    model = random_stable_model(rng, p=3, q=2)
    T = 25
    _, y = simulate(model, T, seed=4)
    scaled = model.replace(obs_map=c * model.obs_map, obs_cov=c**2 * model.obs_cov)
    lhs = log_likelihood(scaled, c * y)
    rhs = log_likelihood(model, y) - model.obs_dim * T * np.log(abs(c))
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_diffuse_terms_excluded():
    y = np.array([1.0, 2.0, 0.5, 1.5])
    res = kalman_filter(local_level(y, Q=0.1), y)
    assert res.n_excluded == 1
    assert res.log_likelihood == pytest.approx(res.loglik_terms[1:].sum())
    assert res.effective_nobs == 3


def test_singular_innovation_names_step():
    model = StateSpaceModel([[1.0]], [[1.0]], [[0.0]], [[0.0]], [0.0], [[0.0]])
    with pytest.raises(SingularInnovationError, match="time step 0"):
        kalman_filter(model, [1.0, 2.0])
    with pytest.raises(SingularInnovationError):
        log_likelihood(model, [1.0, 2.0])


def test_singular_multivariate_by_condition_number():
    A = np.array([[1.0, 0.0], [1.0, 0.0]])
    model = StateSpaceModel(A, np.eye(2), np.zeros((2, 2)), np.zeros((2, 2)),
                            np.zeros(2), np.eye(2))
    with pytest.raises(SingularInnovationError):
        kalman_filter(model, np.ones((3, 2)))


def test_dimension_checks():
    model = pinned_scalar()
    with pytest.raises(ValueError):
        kalman_filter(model, np.zeros((4, 2)))
    with pytest.raises(ValueError):
        StateSpaceModel([[1.0, 0.0]], [[1.0]], [[0.0]], [[1.0]], [0.0], [[0.0]])
    with pytest.raises(ValueError, match="positive semidefinite"):
        StateSpaceModel([[1.0]], [[1.0]], [[-1.0]], [[1.0]], [0.0], [[0.0]])
    tv = StateSpaceModel(np.ones((5, 1, 1)), [[1.0]], [[0.1]], [[1.0]], [0.0], [[1.0]])
    with pytest.raises(ValueError, match="time-varying"):
        kalman_filter(tv, np.zeros(4))


def test_simulate_constant_and_deterministic():
    c = 4.2
    model = StateSpaceModel([[1.0]], [[1.0]], [[0.0]], [[0.0]], [c], [[0.0]])
    x, y = simulate(model, 50, seed=0)
    assert np.all(y == c) and np.all(x == c)
    rng = np.random.default_rng(1)
    m = random_stable_model(rng)
    a = simulate(m, 30, seed=99)
    b = simulate(m, 30, seed=99)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_simulate_random_walk_increment_variance():
    model = StateSpaceModel([[1.0]], [[1.0]], [[1.0]], [[0.0]], [0.0], [[0.0]])
    _, y = simulate(model, 10000, seed=7)
    assert np.var(np.diff(y[:, 0]), ddof=1) == pytest.approx(1.0, rel=0.05)
