# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled diagonal Kalman scans; mirrors ``scan_py`` function for function."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def lkf_forward(const double[:, :, ::1] z, const double[:, :, ::1] l,
                const double[::1] gamma, const double[::1] lam,
                const double[:, ::1] m0, const double[:, ::1] v0):
    cdef Py_ssize_t B = z.shape[0], T = z.shape[1], K = z.shape[2]
    prior_mean_a = np.empty((B, T, K))
    prior_var_a = np.empty((B, T, K))
    gain_a = np.empty((B, T, K))
    mean_a = np.empty((B, T, K))
    var_a = np.empty((B, T, K))
    cdef double[:, :, ::1] prior_mean = prior_mean_a
    cdef double[:, :, ::1] prior_var = prior_var_a
    cdef double[:, :, ::1] gain = gain_a
    cdef double[:, :, ::1] mean = mean_a
    cdef double[:, :, ::1] var = var_a
    cdef Py_ssize_t b, t, i
    cdef double m, v, pm, pv, k, g
    with nogil:
        for b in range(B):
            for i in range(K):
                m = m0[b, i]
                v = v0[b, i]
                g = gamma[i]
                for t in range(T):
                    pm = g * m
                    pv = (g * g) * v + lam[i]
                    k = pv / (pv + l[b, t, i])
                    m = pm + k * (z[b, t, i] - pm)
                    v = pv * l[b, t, i] / (pv + l[b, t, i])
                    prior_mean[b, t, i] = pm
                    prior_var[b, t, i] = pv
                    gain[b, t, i] = k
                    mean[b, t, i] = m
                    var[b, t, i] = v
    return prior_mean_a, prior_var_a, gain_a, mean_a, var_a


def lkf_backward(const double[:, :, ::1] z, const double[:, :, ::1] l,
                 const double[::1] gamma, const double[::1] lam,
                 const double[:, ::1] m0, const double[:, ::1] v0, saved,
                 const double[:, :, ::1] g_mean, const double[:, :, ::1] g_var,
                 const double[:, :, ::1] g_gain):
    cdef const double[:, :, ::1] prior_mean = saved[0]
    cdef const double[:, :, ::1] prior_var = saved[1]
    cdef const double[:, :, ::1] gain = saved[2]
    cdef const double[:, :, ::1] mean = saved[3]
    cdef const double[:, :, ::1] var = saved[4]
    cdef Py_ssize_t B = z.shape[0], T = z.shape[1], K = z.shape[2]
    gz_a = np.empty((B, T, K))
    gl_a = np.empty((B, T, K))
    g_gamma_a = np.zeros(K)
    g_lam_a = np.zeros(K)
    gm_a = np.zeros((B, K))
    gv_a = np.zeros((B, K))
    cdef double[:, :, ::1] gz = gz_a
    cdef double[:, :, ::1] gl = gl_a
    cdef double[::1] g_gamma = g_gamma_a
    cdef double[::1] g_lam = g_lam_a
    cdef double[:, ::1] gm_out = gm_a
    cdef double[:, ::1] gv_out = gv_a
    cdef Py_ssize_t b, t, i
    cdef double gm, gv, pm, pv, k, lt, m_prev, v_prev, gk, gpm, gpv, denom, g
    with nogil:
        for b in range(B):
            for i in range(K):
                gm = 0.0
                gv = 0.0
                g = gamma[i]
                for t in range(T - 1, -1, -1):
                    gm = gm + g_mean[b, t, i]
                    gv = gv + g_var[b, t, i]
                    pm = prior_mean[b, t, i]
                    pv = prior_var[b, t, i]
                    k = gain[b, t, i]
                    lt = l[b, t, i]
                    if t > 0:
                        m_prev = mean[b, t - 1, i]
                        v_prev = var[b, t - 1, i]
                    else:
                        m_prev = m0[b, i]
                        v_prev = v0[b, i]
                    gk = g_gain[b, t, i] + gm * (z[b, t, i] - pm) - gv * pv
                    gz[b, t, i] = gm * k
                    gpm = gm * (1.0 - k)
                    denom = pv + lt
                    gpv = gv * (1.0 - k) + gk * lt / (denom * denom)
                    gl[b, t, i] = -gk * pv / (denom * denom)
                    g_gamma[i] += gpm * m_prev + gpv * 2.0 * g * v_prev
                    g_lam[i] += gpv
                    gm = gpm * g
                    gv = gpv * g * g
                gm_out[b, i] = gm
                gv_out[b, i] = gv
    return gz_a, gl_a, g_gamma_a, g_lam_a, gm_a, gv_a


def ekf_forward(const double[:, :, ::1] z, const double[:, :, ::1] l,
                const double[::1] lam,
                const double[:, ::1] wf, const double[::1] bf,
                const double[:, ::1] wh, const double[::1] bh,
                const double[:, ::1] m0, const double[:, ::1] v0,
                double var_floor):
    cdef Py_ssize_t B = z.shape[0], T = z.shape[1], K = z.shape[2]
    coef_f_a = np.empty((B, T, 3 * K))
    coef_h_a = np.empty((B, T, 3 * K))
    prior_mean_a = np.empty((B, T, K))
    prior_var_a = np.empty((B, T, K))
    gain_a = np.empty((B, T, K))
    mean_a = np.empty((B, T, K))
    var_a = np.empty((B, T, K))
    floored_a = np.zeros((B, T, K), dtype=np.bool_)
    cdef double[:, :, ::1] coef_f = coef_f_a
    cdef double[:, :, ::1] coef_h = coef_h_a
    cdef double[:, :, ::1] prior_mean = prior_mean_a
    cdef double[:, :, ::1] prior_var = prior_var_a
    cdef double[:, :, ::1] gain = gain_a
    cdef double[:, :, ::1] mean = mean_a
    cdef double[:, :, ::1] var = var_a
    cdef cnp.npy_bool[:, :, ::1] floored = floored_a
    cdef Py_ssize_t b, t, i, j, q
    cdef double acc, a0, a1, a2, b0, b1, b2, mp, vp, pm, jf, pv, hv, jh, s, k, v_raw
    with nogil:
        for b in range(B):
            for t in range(T):
                # coefficient heads read the previous posterior mean
                for j in range(3 * K):
                    acc = 0.0
                    for q in range(K):
                        if t > 0:
                            acc = acc + mean[b, t - 1, q] * wf[q, j]
                        else:
                            acc = acc + m0[b, q] * wf[q, j]
                    coef_f[b, t, j] = acc + bf[j]
                for i in range(K):
                    if t > 0:
                        mp = mean[b, t - 1, i]
                        vp = var[b, t - 1, i]
                    else:
                        mp = m0[b, i]
                        vp = v0[b, i]
                    a0 = coef_f[b, t, i]
                    a1 = coef_f[b, t, K + i]
                    a2 = coef_f[b, t, 2 * K + i]
                    pm = a0 + a1 * mp + a2 * mp * mp
                    jf = a1 + 2.0 * a2 * mp
                    prior_mean[b, t, i] = pm
                    prior_var[b, t, i] = jf * jf * vp + lam[i]
                for j in range(3 * K):
                    acc = 0.0
                    for q in range(K):
                        acc = acc + prior_mean[b, t, q] * wh[q, j]
                    coef_h[b, t, j] = acc + bh[j]
                for i in range(K):
                    pm = prior_mean[b, t, i]
                    pv = prior_var[b, t, i]
                    b0 = coef_h[b, t, i]
                    b1 = coef_h[b, t, K + i]
                    b2 = coef_h[b, t, 2 * K + i]
                    hv = b0 + b1 * pm + b2 * pm * pm
                    jh = b1 + 2.0 * b2 * pm
                    s = jh * jh * pv + l[b, t, i]
                    k = pv * jh / s
                    gain[b, t, i] = k
                    mean[b, t, i] = pm + k * (z[b, t, i] - hv)
                    v_raw = pv * l[b, t, i] / s
                    if v_raw <= var_floor:
                        var[b, t, i] = var_floor
                        floored[b, t, i] = 1
                    else:
                        var[b, t, i] = v_raw
    return coef_f_a, coef_h_a, prior_mean_a, prior_var_a, gain_a, mean_a, var_a, floored_a


def ekf_backward(const double[:, :, ::1] z, const double[:, :, ::1] l,
                 const double[::1] lam,
                 const double[:, ::1] wf, const double[::1] bf,
                 const double[:, ::1] wh, const double[::1] bh,
                 const double[:, ::1] m0, const double[:, ::1] v0, saved,
                 const double[:, :, ::1] g_mean, const double[:, :, ::1] g_var,
                 const double[:, :, ::1] g_gain):
    cdef const double[:, :, ::1] coef_f = saved[0]
    cdef const double[:, :, ::1] coef_h = saved[1]
    cdef const double[:, :, ::1] prior_mean = saved[2]
    cdef const double[:, :, ::1] prior_var = saved[3]
    cdef const double[:, :, ::1] gain = saved[4]
    cdef const double[:, :, ::1] mean = saved[5]
    cdef const double[:, :, ::1] var = saved[6]
    cdef const cnp.npy_bool[:, :, ::1] floored = saved[7]
    cdef Py_ssize_t B = z.shape[0], T = z.shape[1], K = z.shape[2]
    gz_a = np.empty((B, T, K))
    gl_a = np.empty((B, T, K))
    g_lam_a = np.zeros(K)
    g_wf_a = np.zeros((K, 3 * K))
    g_bf_a = np.zeros(3 * K)
    g_wh_a = np.zeros((K, 3 * K))
    g_bh_a = np.zeros(3 * K)
    gm_a = np.zeros((B, K))
    gv_a = np.zeros((B, K))
    g_a_a = np.empty(3 * K)
    g_b_a = np.empty(3 * K)
    g_pm_a = np.empty(K)
    g_mp_a = np.empty(K)
    cdef double[:, :, ::1] gz = gz_a
    cdef double[:, :, ::1] gl = gl_a
    cdef double[::1] g_lam = g_lam_a
    cdef double[:, ::1] g_wf = g_wf_a
    cdef double[::1] g_bf = g_bf_a
    cdef double[:, ::1] g_wh = g_wh_a
    cdef double[::1] g_bh = g_bh_a
    cdef double[:, ::1] gm = gm_a
    cdef double[:, ::1] gv = gv_a
    cdef double[::1] g_a = g_a_a
    cdef double[::1] g_b = g_b_a
    cdef double[::1] g_pm = g_pm_a
    cdef double[::1] g_mp = g_mp_a
    cdef Py_ssize_t b, t, i, j, q
    cdef double a1, a2, b0, b1, b2, pm, pv, k, mp, vp, hv, jh, jf, s
    cdef double gmi, gvi, gv_raw, gk, g_jh, g_pv, g_hv, g_s, g_jf, acc
    with nogil:
        for b in range(B):
            for t in range(T - 1, -1, -1):
                for i in range(K):
                    gmi = gm[b, i] + g_mean[b, t, i]
                    gvi = gv[b, i] + g_var[b, t, i]
                    b0 = coef_h[b, t, i]
                    b1 = coef_h[b, t, K + i]
                    b2 = coef_h[b, t, 2 * K + i]
                    pm = prior_mean[b, t, i]
                    pv = prior_var[b, t, i]
                    k = gain[b, t, i]
                    hv = b0 + b1 * pm + b2 * pm * pm
                    jh = b1 + 2.0 * b2 * pm
                    s = jh * jh * pv + l[b, t, i]
                    if floored[b, t, i]:
                        gv_raw = 0.0
                    else:
                        gv_raw = gvi
                    gk = g_gain[b, t, i] + gmi * (z[b, t, i] - hv) - gv_raw * jh * pv
                    g_jh = -gv_raw * k * pv
                    g_pv = gv_raw * (1.0 - k * jh)
                    gz[b, t, i] = gmi * k
                    g_hv = -gmi * k
                    g_pv = g_pv + gk * jh / s
                    g_jh = g_jh + gk * pv / s
                    g_s = -gk * k / s
                    g_jh = g_jh + g_s * 2.0 * jh * pv
                    g_pv = g_pv + g_s * jh * jh
                    gl[b, t, i] = g_s
                    g_b[i] = g_hv
                    g_b[K + i] = g_hv * pm + g_jh
                    g_b[2 * K + i] = g_hv * pm * pm + g_jh * 2.0 * pm
                    g_pm[i] = gmi + g_hv * (b1 + 2.0 * b2 * pm) + g_jh * 2.0 * b2
                    # stash the prior-variance gradient in gv; consumed below
                    gv[b, i] = g_pv
                for j in range(3 * K):
                    g_bh[j] += g_b[j]
                    for q in range(K):
                        g_wh[q, j] += prior_mean[b, t, q] * g_b[j]
                for q in range(K):
                    acc = 0.0
                    for j in range(3 * K):
                        acc = acc + g_b[j] * wh[q, j]
                    g_pm[q] = g_pm[q] + acc
                for i in range(K):
                    if t > 0:
                        mp = mean[b, t - 1, i]
                        vp = var[b, t - 1, i]
                    else:
                        mp = m0[b, i]
                        vp = v0[b, i]
                    a1 = coef_f[b, t, K + i]
                    a2 = coef_f[b, t, 2 * K + i]
                    jf = a1 + 2.0 * a2 * mp
                    g_pv = gv[b, i]
                    g_jf = g_pv * 2.0 * jf * vp
                    g_lam[i] += g_pv
                    gv[b, i] = g_pv * jf * jf
                    g_a[i] = g_pm[i]
                    g_a[K + i] = g_pm[i] * mp + g_jf
                    g_a[2 * K + i] = g_pm[i] * mp * mp + g_jf * 2.0 * mp
                    g_mp[i] = g_pm[i] * (a1 + 2.0 * a2 * mp) + g_jf * 2.0 * a2
                for j in range(3 * K):
                    g_bf[j] += g_a[j]
                    for q in range(K):
                        if t > 0:
                            g_wf[q, j] += mean[b, t - 1, q] * g_a[j]
                        else:
                            g_wf[q, j] += m0[b, q] * g_a[j]
                for q in range(K):
                    acc = 0.0
                    for j in range(3 * K):
                        acc = acc + g_a[j] * wf[q, j]
                    gm[b, q] = g_mp[q] + acc
    return gz_a, gl_a, g_lam_a, g_wf_a, g_bf_a, g_wh_a, g_bh_a, gm_a, gv_a
