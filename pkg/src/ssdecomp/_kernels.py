"""Compiled inner loops for the Kalman filter, smoother and Hamilton filter.

The public wrappers in :mod:`ssdecomp.ssm` and :mod:`ssdecomp.regime` do all
validation; these functions assume well-formed contiguous float64 input.
Scalar-observation models (the structural-model hot path) get dedicated
allocation-free loops.

The smoother is the Rauch-Tung-Striebel recursion written so that every
smoothed covariance is a sum of PSD terms.
"""

import numpy as np
from numba import njit

LOG_2PI = np.log(2.0 * np.pi)
MAX_COND = 1e12


@njit(cache=True, nogil=True)
def _symmetrize(P):
    return 0.5 * (P + P.T)


@njit(cache=True, nogil=True)
def _mm(A, B, out):
    n, m = A.shape
    k = B.shape[1]
    for i in range(n):
        for j in range(k):
            s = 0.0
            for l in range(m):
                s += A[i, l] * B[l, j]
            out[i, j] = s


@njit(cache=True, nogil=True)
def _observed_index(row):
    k = 0
    for i in range(row.shape[0]):
        if not np.isnan(row[i]):
            k += 1
    idx = np.empty(k, dtype=np.int64)
    k = 0
    for i in range(row.shape[0]):
        if not np.isnan(row[i]):
            idx[k] = i
            k += 1
    return idx


# ---------------------------------------------------------------------------
# general (vector observation) recursions
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def kalman_filter_loop(y, A, Phi, Q, R, mu, Sigma):
    """Predict/update recursions with Joseph-form covariance updates.

    Returns the usual moments plus per-step log-likelihood terms and a status
    code: -1 on success, otherwise the index of the first step whose
    innovation covariance is singular.
    """
    T, q = y.shape
    p = Phi.shape[0]
    a_pred = np.zeros((T, p))
    P_pred = np.zeros((T, p, p))
    a_filt = np.zeros((T, p))
    P_filt = np.zeros((T, p, p))
    v_all = np.full((T, q), np.nan)
    F_all = np.full((T, q, q), np.nan)
    ll = np.zeros(T)
    n_obs = np.zeros(T, dtype=np.int64)
    eye = np.eye(p)

    a = mu.copy()
    P = Sigma.copy()
    for t in range(T):
        a = Phi @ a
        P = _symmetrize(Phi @ P @ Phi.T + Q)
        a_pred[t] = a
        P_pred[t] = P
        idx = _observed_index(y[t])
        k = idx.shape[0]
        n_obs[t] = k
        if k == 0:
            a_filt[t] = a
            P_filt[t] = P
            continue
        Z = np.empty((k, p))
        H = np.empty((k, k))
        v = np.empty(k)
        for r in range(k):
            Z[r] = A[t, idx[r]]
            for c in range(k):
                H[r, c] = R[idx[r], idx[c]]
        for r in range(k):
            v[r] = y[t, idx[r]] - Z[r] @ a
        F = _symmetrize(Z @ P @ Z.T + H)
        if k == 1:
            if not F[0, 0] > 0.0:
                return a_pred, P_pred, a_filt, P_filt, v_all, F_all, ll, n_obs, t
        elif np.linalg.cond(F) > MAX_COND:
            return a_pred, P_pred, a_filt, P_filt, v_all, F_all, ll, n_obs, t
        Finv = np.linalg.inv(F)
        K = P @ Z.T @ Finv
        a = a + K @ v
        IKZ = eye - K @ Z
        P = _symmetrize(IKZ @ P @ IKZ.T + K @ H @ K.T)
        a_filt[t] = a
        P_filt[t] = P
        sign, logdet = np.linalg.slogdet(F)
        ll[t] = -0.5 * (k * LOG_2PI + logdet + v @ Finv @ v)
        for r in range(k):
            v_all[t, idx[r]] = v[r]
            for c in range(k):
                F_all[t, idx[r], idx[c]] = F[r, c]
    return a_pred, P_pred, a_filt, P_filt, v_all, F_all, ll, n_obs, -1


@njit(cache=True, nogil=True)
def kalman_loglik_loop(y, A, Phi, Q, R, mu, Sigma, n_skip):
    """Log-likelihood only; ``-inf`` if an innovation covariance is singular.

    The first ``n_skip`` observed steps are left out of the total.
    """
    T, q = y.shape
    p = Phi.shape[0]
    eye = np.eye(p)
    a = mu.copy()
    P = Sigma.copy()
    total = 0.0
    seen = 0
    for t in range(T):
        a = Phi @ a
        P = _symmetrize(Phi @ P @ Phi.T + Q)
        idx = _observed_index(y[t])
        k = idx.shape[0]
        if k == 0:
            continue
        Z = np.empty((k, p))
        H = np.empty((k, k))
        v = np.empty(k)
        for r in range(k):
            Z[r] = A[t, idx[r]]
            for c in range(k):
                H[r, c] = R[idx[r], idx[c]]
        for r in range(k):
            v[r] = y[t, idx[r]] - Z[r] @ a
        F = _symmetrize(Z @ P @ Z.T + H)
        if k == 1:
            if not F[0, 0] > 0.0:
                return -np.inf
        elif np.linalg.cond(F) > MAX_COND:
            return -np.inf
        Finv = np.linalg.inv(F)
        K = P @ Z.T @ Finv
        a = a + K @ v
        IKZ = eye - K @ Z
        P = _symmetrize(IKZ @ P @ IKZ.T + K @ H @ K.T)
        if seen >= n_skip:
            sign, logdet = np.linalg.slogdet(F)
            total += -0.5 * (k * LOG_2PI + logdet + v @ Finv @ v)
        seen += 1
    return total


@njit(cache=True, nogil=True)
def _cholesky_solve(S, M, L, X):
    """Solve ``S X = M`` by Cholesky into ``X``; False if ``S`` is not positive definite."""
    p = S.shape[0]
    top = 0.0
    for i in range(p):
        top = max(top, S[i, i])
    for j in range(p):
        d = S[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if not d > 1e-14 * top:
            return False
        L[j, j] = np.sqrt(d)
        for i in range(j + 1, p):
            s = S[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    m = M.shape[1]
    for c in range(m):
        for i in range(p):
            s = M[i, c]
            for k in range(i):
                s -= L[i, k] * X[k, c]
            X[i, c] = s / L[i, i]
        for i in range(p - 1, -1, -1):
            s = X[i, c]
            for k in range(i + 1, p):
                s -= L[k, i] * X[k, c]
            X[i, c] = s / L[i, i]
    return True


@njit(cache=True, nogil=True)
def smoother_loop(Phi, Q, mu, Sigma, a_pred, P_pred, a_filt, P_filt):
    """Fixed-interval (RTS) smoother; returns states 1..T, x(0) and lag-one covariances.

    Smoothed covariances are accumulated as a sum of PSD terms,
    (I - J Phi) P_f (I - J Phi)' + J (Q + P_s) J', which stays accurate when
    the initial variance is very large; the textbook difference form
    P_f - J (P_pred - P_s) J' cancels catastrophically there.
    ``lag1[t]`` is Cov(x_t, x_{t-1} | all data), with x_{-1} read as x(0).
    """
    T, p = a_pred.shape
    a_s = a_filt.copy()
    P_s = P_filt.copy()
    lag1 = np.zeros((T, p, p))
    a0 = mu.copy()
    P0 = Sigma.copy()
    M = np.empty((p, p))
    G = np.empty((p, p))
    J = np.empty((p, p))
    IJ = np.empty((p, p))
    W1 = np.empty((p, p))
    W2 = np.empty((p, p))
    Lc = np.zeros((p, p))
    d = np.empty(p)
    for t in range(T - 1, -1, -1):
        if t > 0:
            a_f = a_filt[t - 1]
            P_f = P_filt[t - 1]
        else:
            a_f = mu
            P_f = Sigma
        # J' = P_pred^{-1} Phi P_f
        _mm(Phi, P_f, M)
        if not _cholesky_solve(P_pred[t], M, Lc, G):
            # singular prediction: the right-hand side lies in its range
            G[:, :] = np.linalg.lstsq(P_pred[t], M)[0]
        for i in range(p):
            for j in range(p):
                J[i, j] = G[j, i]
        for i in range(p):
            d[i] = a_s[t, i] - a_pred[t, i]
        _mm(J, Phi, IJ)
        for i in range(p):
            for j in range(p):
                IJ[i, j] = -IJ[i, j]
            IJ[i, i] += 1.0
        # (I - J Phi) P_f (I - J Phi)'
        _mm(IJ, P_f, W1)
        _mm(W1, IJ.T, W2)
        # + J (Q + P_s) J'
        for i in range(p):
            for j in range(p):
                W1[i, j] = Q[i, j] + P_s[t, i, j]
        _mm(J, W1, M)
        _mm(M, J.T, W1)
        _mm(P_s[t], J.T, lag1[t])
        if t > 0:
            out_a = a_s[t - 1]
            out_P = P_s[t - 1]
        else:
            out_a = a0
            out_P = P0
        for i in range(p):
            s = a_f[i]
            for j in range(p):
                s += J[i, j] * d[j]
            out_a[i] = s
        for i in range(p):
            for j in range(i, p):
                v = 0.5 * (W2[i, j] + W2[j, i] + W1[i, j] + W1[j, i])
                out_P[i, j] = v
                out_P[j, i] = v
    return a_s, P_s, lag1, a0, P0


# ---------------------------------------------------------------------------
# scalar-observation recursions (no per-step allocation)
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _predict(Phi, Q, a, P, a_out, P_out, tmp):
    p = a.shape[0]
    for i in range(p):
        s = 0.0
        for j in range(p):
            s += Phi[i, j] * a[j]
        a_out[i] = s
    for i in range(p):
        for j in range(p):
            s = 0.0
            for m in range(p):
                s += Phi[i, m] * P[m, j]
            tmp[i, j] = s
    for i in range(p):
        for j in range(i, p):
            s = Q[i, j]
            for m in range(p):
                s += tmp[i, m] * Phi[j, m]
            P_out[i, j] = s
            P_out[j, i] = s


@njit(cache=True, nogil=True)
def _update(z, R, yt, a, P, Pz, k, B, W):
    """Joseph-form update in place; returns (v, F).

    ``B = I - k z'`` is formed first so that rounding errors enter the
    covariance only at second order in large-variance directions.
    """
    p = a.shape[0]
    v = yt
    for i in range(p):
        v -= z[i] * a[i]
    F = R
    for i in range(p):
        s = 0.0
        for j in range(p):
            s += P[i, j] * z[j]
        Pz[i] = s
        F += z[i] * s
    if not F > 0.0:
        return v, F
    for i in range(p):
        k[i] = Pz[i] / F
        a[i] += k[i] * v
    for i in range(p):
        for j in range(p):
            B[i, j] = -k[i] * z[j]
        B[i, i] += 1.0
    _mm(B, P, W)
    for i in range(p):
        for j in range(i, p):
            s = R * k[i] * k[j]
            for m in range(p):
                s += W[i, m] * B[j, m]
            P[i, j] = s
            P[j, i] = s
    return v, F


@njit(cache=True, nogil=True)
def _diffuse_update(z, R, yt, a, Ps, Pd, Ms, Md):
    """Update with the initial covariance carried as ``Pd + Ps``.

    ``Pd`` holds the large-variance surrogate for diffuse states and ``Ps``
    everything else. The update of the sum is rearranged so that no
    large-variance terms cancel:

        Pd <- Pd - Md Md' / Fd
        Ps <- Ps - (Md Ms' + Ms Md' + Ms Ms') / F + Md Md' Fs / (Fd F)

    with ``M = P z``, ``F = Fd + Fs``. Returns (v, F).
    """
    p = a.shape[0]
    v = yt
    for i in range(p):
        v -= z[i] * a[i]
    Fs = R
    Fd = 0.0
    for i in range(p):
        s = 0.0
        d = 0.0
        for j in range(p):
            s += Ps[i, j] * z[j]
            d += Pd[i, j] * z[j]
        Ms[i] = s
        Md[i] = d
        Fs += z[i] * s
        Fd += z[i] * d
    F = Fd + Fs
    for i in range(p):
        a[i] += (Md[i] + Ms[i]) * v / F
    c = Fs / (Fd * F)
    for i in range(p):
        for j in range(i, p):
            val = (Ps[i, j] - (Md[i] * Ms[j] + Ms[i] * Md[j] + Ms[i] * Ms[j]) / F
                   + Md[i] * Md[j] * c)
            Ps[i, j] = val
            Ps[j, i] = val
            val = Pd[i, j] - Md[i] * Md[j] / Fd
            Pd[i, j] = val
            Pd[j, i] = val
    return v, F


@njit(cache=True, nogil=True)
def _uni_step(z, R, yt, a, Ps, Pd, active, tol, Ms, Md, B, W):
    """One scalar update; returns (v, F, still_diffuse)."""
    p = a.shape[0]
    if active:
        Fd = 0.0
        for i in range(p):
            d = 0.0
            for j in range(p):
                d += Pd[i, j] * z[j]
            Fd += z[i] * d
        if Fd > tol:
            v, F = _diffuse_update(z, R, yt, a, Ps, Pd, Ms, Md)
            top = 0.0
            for i in range(p):
                top = max(top, abs(Pd[i, i]))
            if top <= tol:
                Pd[:, :] = 0.0
                active = False
            return v, F, active
        # nothing diffuse is seen at this step: fall back to one covariance
        for i in range(p):
            for j in range(p):
                Ps[i, j] += Pd[i, j]
        Pd[:, :] = 0.0
        active = False
    v, F = _update(z, R, yt, a, Ps, Ms, Md, B, W)
    return v, F, active


@njit(cache=True, nogil=True)
def _predict_split(Phi, Q, Q0, a, Ps, Pd, active, a_next, P_next, tmp):
    _predict(Phi, Q, a, Ps, a_next, P_next, tmp)
    a[:] = a_next
    Ps[:, :] = P_next
    if active:
        _predict(Phi, Q0, a, Pd, a_next, P_next, tmp)
        Pd[:, :] = P_next


@njit(cache=True, nogil=True)
def uni_filter_loop(y, Z, Phi, Q, R, mu, Sigma, Sigma_d, tol):
    """Scalar-observation filter; ``Sigma_d`` is the diffuse part of the initial covariance."""
    T = y.shape[0]
    p = Phi.shape[0]
    a_pred = np.zeros((T, p))
    P_pred = np.zeros((T, p, p))
    a_filt = np.zeros((T, p))
    P_filt = np.zeros((T, p, p))
    v_all = np.full(T, np.nan)
    F_all = np.full(T, np.nan)
    ll = np.zeros(T)
    n_obs = np.zeros(T, dtype=np.int64)
    a = mu.copy()
    Ps = Sigma.copy()
    Pd = Sigma_d.copy()
    active = np.abs(Pd).max() > 0.0 if p > 0 else False
    Q0 = np.zeros((p, p))
    a_next = np.empty(p)
    P_next = np.empty((p, p))
    tmp = np.empty((p, p))
    Ms = np.empty(p)
    Md = np.empty(p)
    B = np.empty((p, p))
    W = np.empty((p, p))
    for t in range(T):
        _predict_split(Phi, Q, Q0, a, Ps, Pd, active, a_next, P_next, tmp)
        a_pred[t] = a
        P_pred[t] = Ps + Pd
        if np.isnan(y[t]):
            a_filt[t] = a
            P_filt[t] = P_pred[t]
            continue
        n_obs[t] = 1
        v, F, active = _uni_step(Z[t], R, y[t], a, Ps, Pd, active, tol, Ms, Md, B, W)
        if not F > 0.0:
            return a_pred, P_pred, a_filt, P_filt, v_all, F_all, ll, n_obs, t
        a_filt[t] = a
        P_filt[t] = Ps + Pd
        v_all[t] = v
        F_all[t] = F
        ll[t] = -0.5 * (LOG_2PI + np.log(F) + v * v / F)
    return a_pred, P_pred, a_filt, P_filt, v_all, F_all, ll, n_obs, -1


@njit(cache=True, nogil=True)
def uni_loglik_loop(y, Z, Phi, Q, R, mu, Sigma, Sigma_d, tol, n_skip):
    T = y.shape[0]
    p = Phi.shape[0]
    a = mu.copy()
    Ps = Sigma.copy()
    Pd = Sigma_d.copy()
    active = np.abs(Pd).max() > 0.0 if p > 0 else False
    Q0 = np.zeros((p, p))
    a_next = np.empty(p)
    P_next = np.empty((p, p))
    tmp = np.empty((p, p))
    Ms = np.empty(p)
    Md = np.empty(p)
    B = np.empty((p, p))
    W = np.empty((p, p))
    total = 0.0
    seen = 0
    for t in range(T):
        _predict_split(Phi, Q, Q0, a, Ps, Pd, active, a_next, P_next, tmp)
        if np.isnan(y[t]):
            continue
        v, F, active = _uni_step(Z[t], R, y[t], a, Ps, Pd, active, tol, Ms, Md, B, W)
        if not F > 0.0:
            return -np.inf
        if seen >= n_skip:
            total += -0.5 * (LOG_2PI + np.log(F) + v * v / F)
        seen += 1
    return total


# ---------------------------------------------------------------------------
# regime switching
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def hamilton_loop(dens, P, init):
    """Regime-probability recursion.

    ``dens[t, r]`` is the conditional density of y_t in regime r, or NaN for
    steps that carry no data (the conditioning presample).
    """
    T, n = dens.shape
    pred = np.zeros((T, n))
    filt = np.zeros((T, n))
    ll = 0.0
    xi = init.copy()
    nxt = np.empty(n)
    for t in range(T):
        if t > 0:
            for j in range(n):
                s = 0.0
                for i in range(n):
                    s += P[i, j] * xi[i]
                nxt[j] = s
            xi[:] = nxt
        for j in range(n):
            pred[t, j] = xi[j]
        if np.isnan(dens[t, 0]):
            for j in range(n):
                filt[t, j] = xi[j]
            continue
        lik = 0.0
        for j in range(n):
            xi[j] *= dens[t, j]
            lik += xi[j]
        if not lik > 0.0:
            return pred, filt, -np.inf
        ll += np.log(lik)
        for j in range(n):
            xi[j] /= lik
            filt[t, j] = xi[j]
    return pred, filt, ll


@njit(cache=True, nogil=True)
def kim_smoother_loop(P, pred, filt):
    T, n = filt.shape
    sm = np.zeros((T, n))
    sm[T - 1] = filt[T - 1]
    for t in range(T - 2, -1, -1):
        ratio = np.zeros(n)
        for j in range(n):
            if pred[t + 1, j] > 0.0:
                ratio[j] = sm[t + 1, j] / pred[t + 1, j]
        sm[t] = filt[t] * (P @ ratio)
        s = sm[t].sum()
        if s > 0.0:
            sm[t] = sm[t] / s
    return sm
