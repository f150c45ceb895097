"""Log-posterior and gradient kernels over packed cohort arrays.

Two implementations with identical contracts:

* ``logp_grad_loop``: explicit per-subject loops, compiled with numba;
* ``logp_grad_numpy``: vectorised over observations and hazard segments.

``logp_grad`` points at the one selected by ``hetjm._accel.BACKEND``.

Unconstrained layout: beta(4), nu, log sigma0, gamma0, gamma1, logit(k/U_k),
logit(xi/U_xi), log tau(5), correlation angles(10), then 5 non-centred
effects per subject.
"""

import math

import numpy as np

from ._accel import BACKEND, njit

K = 5
N_ANGLES = K * (K - 1) // 2
I_BETA, I_NU, I_LSIG, I_G0, I_G1, I_LK, I_LXI = 0, 4, 5, 6, 7, 8, 9
I_LTAU = 10
I_ANG = I_LTAU + K
N_GLOBAL = I_ANG + N_ANGLES
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LOG2 = math.log(2.0)


@njit(cache=True)
def _log_sech2(y):
    a = abs(y)
    return 2.0 * (LOG2 - a - math.log1p(math.exp(-2.0 * a)))


@njit(cache=True)
def _log_sigmoid(u):
    if u >= 0:
        return -math.log1p(math.exp(-u))
    return u - math.log1p(math.exp(u))


@njit(cache=True)
def log_bounded(u, bound):
    """Log of ``bound * sigmoid(u)``."""
    return math.log(bound) + _log_sigmoid(u)


@njit(cache=True)
def corr_cholesky(y):
    """Map unconstrained angles to a correlation Cholesky factor.

    Returns ``(L, log_jacobian)``. Row ``i`` uses ``z = tanh(y)`` as canonical
    partial correlations, filled row-wise below the diagonal.
    """
    L = np.zeros((K, K))
    L[0, 0] = 1.0
    logjac = 0.0
    idx = 0
    for i in range(1, K):
        logrem = 0.0
        for j in range(i):
            z = math.tanh(y[idx])
            L[i, j] = z * math.exp(0.5 * logrem)
            u = _log_sech2(y[idx])
            logjac += u + 0.5 * logrem
            logrem += u
            idx += 1
        L[i, i] = math.exp(0.5 * logrem)
    return L, logjac


@njit(cache=True)
def corr_cholesky_vjp(y, L, G):
    """Gradient wrt the angles of ``f(L(y)) + log_jacobian(y)`` given ``G = df/dL``."""
    dy = np.zeros(N_ANGLES)
    idx = 0
    for i in range(1, K):
        logrem = 0.0
        # tail[j] = sum_{l >= j} G[i, l] L[i, l] over l = j..i
        tail = np.zeros(i + 2)
        for l in range(i, -1, -1):
            tail[l] = tail[l + 1] + G[i, l] * L[i, l]
        for k in range(i):
            z = math.tanh(y[idx])
            direct = G[i, k] * math.exp(0.5 * logrem) * (1.0 - z * z)
            dy[idx] = direct - z * tail[k + 1] - 2.0 * z - (i - 1 - k) * z
            logrem += _log_sech2(y[idx])
            idx += 1
    return dy


@njit(cache=True)
def corr_unconstrain(L):
    y = np.zeros(N_ANGLES)
    idx = 0
    for i in range(1, K):
        rem = 1.0
        for j in range(i):
            z = L[i, j] / math.sqrt(rem)
            y[idx] = math.atanh(z)
            rem -= L[i, j] ** 2
            idx += 1
    return y


@njit(cache=True)
def _prior_and_globals(x, hc_scale, sig_scale, lkj_eta, bound_k, bound_xi, grad):
    """Prior terms for global blocks; writes their gradient into ``grad``.

    Weibull gradients are accumulated with respect to ``log k`` and
    ``log xi`` and converted to the logit coordinates by ``_finish_globals``.
    Returns ``(lp, L, tau, log_k, log_xi)``.
    """
    lsig = x[I_LSIG]
    lk = log_bounded(x[I_LK], bound_k)
    lxi = log_bounded(x[I_LXI], bound_xi)
    L, logjac = corr_cholesky(x[I_ANG:I_ANG + N_ANGLES])
    tau = np.exp(x[I_LTAU:I_LTAU + K])
    sig = math.exp(lsig)
    lp = -0.5 * sig * sig / (sig_scale * sig_scale) + lsig
    grad[I_LSIG] += -sig * sig / (sig_scale * sig_scale) + 1.0
    # uniform on (0, U]: only the logit Jacobian log U + log s + log(1 - s)
    lp += lk + _log_sigmoid(-x[I_LK]) + lxi + _log_sigmoid(-x[I_LXI])
    for k in range(K):
        t2 = (tau[k] / hc_scale) ** 2
        lp += -math.log1p(t2) + x[I_LTAU + k]
        grad[I_LTAU + k] += -2.0 * t2 / (1.0 + t2) + 1.0
    lp += logjac
    for i in range(K):
        lp += 2.0 * (lkj_eta - 1.0) * math.log(L[i, i])
    return lp, L, tau, lk, lxi


@njit(cache=True)
def _finish_globals(x, L, lkj_eta, G_L, grad):
    for idx in (I_LK, I_LXI):
        s = math.exp(_log_sigmoid(x[idx]))
        grad[idx] = grad[idx] * (1.0 - s) + 1.0 - 2.0 * s
    for i in range(K):
        G_L[i, i] += 2.0 * (lkj_eta - 1.0) / L[i, i]
    dy = corr_cholesky_vjp(x[I_ANG:I_ANG + N_ANGLES], L, G_L)
    for a in range(N_ANGLES):
        grad[I_ANG + a] += dy[a]


@njit(cache=True)
def logp_grad_loop(
    x,
    obs_ptr, obs_t, obs_y, obs_p, obs_ts,
    seg_ptr, seg_a, seg_b, seg_q, seg_as,
    sub_logT, sub_D,
    hc_scale, sig_scale, lkj_eta, bound_k, bound_xi,
):
    n_sub = sub_D.shape[0]
    grad = np.zeros(x.shape[0])
    lp, L, tau, log_kk, lxi = _prior_and_globals(x, hc_scale, sig_scale, lkj_eta, bound_k, bound_xi, grad)

    b0m, b1m, b2m, b3m = x[0], x[1], x[2], x[3]
    nu = x[I_NU]
    lsig2 = 2.0 * x[I_LSIG]
    g0 = x[I_G0]
    g1 = x[I_G1]
    kk = math.exp(log_kk)

    G_L = np.zeros((K, K))
    w = np.zeros(K)
    gr = np.zeros(K)
    for i in range(n_sub):
        off = N_GLOBAL + K * i
        for p in range(K):
            acc = 0.0
            for q in range(p + 1):
                acc += L[p, q] * x[off + q]
            w[p] = acc
        r0 = b0m + tau[0] * w[0]
        r1 = b1m + tau[1] * w[1]
        r2 = b2m + tau[2] * w[2]
        r3 = b3m + tau[3] * w[3]
        r4 = tau[4] * w[4]
        for p in range(K):
            gr[p] = 0.0

        for j in range(obs_ptr[i], obs_ptr[i + 1]):
            t = obs_t[j]
            p_ = obs_p[j]
            mu = r0 + r1 * t + p_ * (r2 + r3 * obs_ts[j])
            logv = lsig2 + nu * p_ + r4
            iv = math.exp(-logv)
            e = obs_y[j] - mu
            e2iv = e * e * iv
            lp += -HALF_LOG_2PI - 0.5 * logv - 0.5 * e2iv
            dmu = e * iv
            dlv = 0.5 * (e2iv - 1.0)
            gr[0] += dmu
            gr[1] += dmu * t
            gr[2] += dmu * p_
            gr[3] += dmu * p_ * obs_ts[j]
            gr[4] += dlv
            grad[I_LSIG] += 2.0 * dlv
            grad[I_NU] += p_ * dlv

        last = seg_ptr[i + 1] - 1
        for j in range(seg_ptr[i], seg_ptr[i + 1]):
            a = seg_a[j]
            q_ = seg_q[j]
            mu = r0 + r1 * a + q_ * (r2 + r3 * seg_as[j])
            logv = lsig2 + nu * q_ + r4
            eta = g0 * mu + g1 * logv
            ex = math.exp(eta)
            lb = math.log(seg_b[j]) - lxi
            lam_b = math.exp(kk * lb)
            dlam_b = lam_b * kk * lb
            if a > 0.0:
                la = math.log(a) - lxi
                lam_a = math.exp(kk * la)
                dlam_a = lam_a * kk * la
            else:
                lam_a = 0.0
                dlam_a = 0.0
            h = (lam_b - lam_a) * ex
            lp -= h
            weight = -h
            if j == last and sub_D[i] == 1:
                lp += eta
                weight += 1.0
            grad[I_LK] -= ex * (dlam_b - dlam_a)
            grad[I_LXI] += kk * h
            grad[I_G0] += weight * mu
            grad[I_G1] += weight * logv
            dmu = weight * g0
            dlv = weight * g1
            gr[0] += dmu
            gr[1] += dmu * a
            gr[2] += dmu * q_
            gr[3] += dmu * q_ * seg_as[j]
            gr[4] += dlv
            grad[I_LSIG] += 2.0 * dlv
            grad[I_NU] += q_ * dlv

        if sub_D[i] == 1:
            lt = sub_logT[i]
            lp += log_kk + (kk - 1.0) * lt - kk * lxi
            grad[I_LK] += 1.0 + kk * (lt - lxi)
            grad[I_LXI] -= kk

        for p in range(4):
            grad[p] += gr[p]
        for p in range(K):
            grad[I_LTAU + p] += gr[p] * w[p] * tau[p]
            gr[p] *= tau[p]
        for q in range(K):
            zq = x[off + q]
            lp -= 0.5 * zq * zq
            acc = -zq
            for p in range(q, K):
                acc += L[p, q] * gr[p]
                G_L[p, q] += gr[p] * zq
            grad[off + q] += acc

    _finish_globals(x, L, lkj_eta, G_L, grad)
    return lp, grad


def logp_grad_numpy(
    x,
    obs_ptr, obs_t, obs_y, obs_p, obs_ts,
    seg_ptr, seg_a, seg_b, seg_q, seg_as,
    sub_logT, sub_D,
    hc_scale, sig_scale, lkj_eta, bound_k, bound_xi,
):
    n_sub = sub_D.shape[0]
    grad = np.zeros(x.shape[0])
    lp, L, tau, log_kk, lxi = _prior_and_globals(x, hc_scale, sig_scale, lkj_eta, bound_k, bound_xi, grad)

    theta = np.append(x[:4], 0.0)
    nu, lsig2, g0, g1 = x[I_NU], 2.0 * x[I_LSIG], x[I_G0], x[I_G1]
    kk = math.exp(log_kk)
    Z = x[N_GLOBAL:].reshape(n_sub, K)
    W = Z @ L.T
    R = theta + tau * W

    obs_sub = np.repeat(np.arange(n_sub), np.diff(obs_ptr))
    Ro = R[obs_sub]
    mu = Ro[:, 0] + Ro[:, 1] * obs_t + obs_p * (Ro[:, 2] + Ro[:, 3] * obs_ts)
    logv = lsig2 + nu * obs_p + Ro[:, 4]
    e = obs_y - mu
    e2iv = e * e * np.exp(-logv)
    lp += np.sum(-HALF_LOG_2PI - 0.5 * logv - 0.5 * e2iv)
    dmu_o = e * np.exp(-logv)
    dlv_o = 0.5 * (e2iv - 1.0)
    grad[I_LSIG] += 2.0 * dlv_o.sum()
    grad[I_NU] += (obs_p * dlv_o).sum()

    seg_sub = np.repeat(np.arange(n_sub), np.diff(seg_ptr))
    Rs = R[seg_sub]
    mus = Rs[:, 0] + Rs[:, 1] * seg_a + seg_q * (Rs[:, 2] + Rs[:, 3] * seg_as)
    logvs = lsig2 + nu * seg_q + Rs[:, 4]
    eta = g0 * mus + g1 * logvs
    ex = np.exp(eta)
    lb = np.log(seg_b) - lxi
    lam_b = np.exp(kk * lb)
    positive = seg_a > 0
    la = np.where(positive, np.log(np.where(positive, seg_a, 1.0)) - lxi, 0.0)
    lam_a = np.where(positive, np.exp(kk * la), 0.0)
    h = (lam_b - lam_a) * ex
    is_event = np.zeros(seg_a.shape[0])
    has_seg = seg_ptr[1:] > seg_ptr[:-1]
    is_event[seg_ptr[1:][has_seg] - 1] = sub_D[has_seg]
    lp += np.sum(is_event * eta - h)
    weight = is_event - h
    grad[I_LK] -= np.sum(ex * (lam_b * kk * lb - lam_a * kk * la))
    grad[I_LXI] += kk * h.sum()
    grad[I_G0] += np.sum(weight * mus)
    grad[I_G1] += np.sum(weight * logvs)
    dmu_s = weight * g0
    dlv_s = weight * g1
    grad[I_LSIG] += 2.0 * dlv_s.sum()
    grad[I_NU] += (seg_q * dlv_s).sum()

    events = sub_D == 1
    lp += np.sum(log_kk + (kk - 1.0) * sub_logT[events] - kk * lxi)
    grad[I_LK] += np.sum(1.0 + kk * (sub_logT[events] - lxi))
    grad[I_LXI] -= kk * events.sum()

    def per_subject(idx, values):
        return np.bincount(idx, weights=values, minlength=n_sub)

    GR = np.column_stack(
        [
            per_subject(obs_sub, dmu_o) + per_subject(seg_sub, dmu_s),
            per_subject(obs_sub, dmu_o * obs_t) + per_subject(seg_sub, dmu_s * seg_a),
            per_subject(obs_sub, dmu_o * obs_p) + per_subject(seg_sub, dmu_s * seg_q),
            per_subject(obs_sub, dmu_o * obs_p * obs_ts) + per_subject(seg_sub, dmu_s * seg_q * seg_as),
            per_subject(obs_sub, dlv_o) + per_subject(seg_sub, dlv_s),
        ]
    )
    grad[:4] += GR[:, :4].sum(axis=0)
    grad[I_LTAU:I_LTAU + K] += (GR * W).sum(axis=0) * tau
    GW = GR * tau
    lp -= 0.5 * np.sum(Z * Z)
    grad[N_GLOBAL:] = (GW @ L - Z).ravel()
    G_L = np.tril(GW.T @ Z)
    _finish_globals(x, L, lkj_eta, G_L, grad)
    return lp, grad


logp_grad = logp_grad_loop if BACKEND == "numba" else logp_grad_numpy
