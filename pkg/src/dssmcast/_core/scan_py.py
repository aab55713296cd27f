"""Pure-numpy diagonal Kalman scans with hand-written reverse passes.

Arrays are float64. Sequences are ``B x T x K`` (batch, time, state dim);
per-dimension parameters are length ``K``; initial states are ``B x K``.
The compiled module ``_scan`` exposes the same four functions.
"""

import numpy as np


def lkf_forward(z, l, gamma, lam, m0, v0):
    B, T, K = z.shape
    prior_mean = np.empty((B, T, K))
    prior_var = np.empty((B, T, K))
    gain = np.empty((B, T, K))
    mean = np.empty((B, T, K))
    var = np.empty((B, T, K))
    m, v = m0, v0
    g2 = gamma * gamma
    for t in range(T):
        pm = gamma * m
        pv = g2 * v + lam
        k = pv / (pv + l[:, t])
        m = pm + k * (z[:, t] - pm)
        v = pv * l[:, t] / (pv + l[:, t])
        prior_mean[:, t] = pm
        prior_var[:, t] = pv
        gain[:, t] = k
        mean[:, t] = m
        var[:, t] = v
    return prior_mean, prior_var, gain, mean, var


def lkf_backward(z, l, gamma, lam, m0, v0, saved, g_mean, g_var, g_gain):
    prior_mean, prior_var, gain, mean, var = saved
    B, T, K = z.shape
    gz = np.empty((B, T, K))
    gl = np.empty((B, T, K))
    g_gamma = np.zeros(K)
    g_lam = np.zeros(K)
    gm = np.zeros((B, K))
    gv = np.zeros((B, K))
    for t in range(T - 1, -1, -1):
        gm = gm + g_mean[:, t]
        gv = gv + g_var[:, t]
        pm, pv, k = prior_mean[:, t], prior_var[:, t], gain[:, t]
        lt = l[:, t]
        m_prev = mean[:, t - 1] if t > 0 else m0
        v_prev = var[:, t - 1] if t > 0 else v0
        gk = g_gain[:, t] + gm * (z[:, t] - pm) - gv * pv
        gz[:, t] = gm * k
        gpm = gm * (1.0 - k)
        denom = pv + lt
        gpv = gv * (1.0 - k) + gk * lt / (denom * denom)
        gl[:, t] = -gk * pv / (denom * denom)
        g_gamma += (gpm * m_prev + gpv * 2.0 * gamma * v_prev).sum(axis=0)
        g_lam += gpv.sum(axis=0)
        gm = gpm * gamma
        gv = gpv * gamma * gamma
    return gz, gl, g_gamma, g_lam, gm, gv


def ekf_forward(z, l, lam, wf, bf, wh, bh, m0, v0, var_floor):
    B, T, K = z.shape
    coef_f = np.empty((B, T, 3 * K))
    coef_h = np.empty((B, T, 3 * K))
    prior_mean = np.empty((B, T, K))
    prior_var = np.empty((B, T, K))
    gain = np.empty((B, T, K))
    mean = np.empty((B, T, K))
    var = np.empty((B, T, K))
    floored = np.zeros((B, T, K), dtype=bool)
    m, v = m0, v0
    for t in range(T):
        a = m @ wf + bf
        a0, a1, a2 = a[:, :K], a[:, K : 2 * K], a[:, 2 * K :]
        pm = a0 + a1 * m + a2 * m * m
        jf = a1 + 2.0 * a2 * m
        pv = jf * jf * v + lam
        b = pm @ wh + bh
        b0, b1, b2 = b[:, :K], b[:, K : 2 * K], b[:, 2 * K :]
        hv = b0 + b1 * pm + b2 * pm * pm
        jh = b1 + 2.0 * b2 * pm
        s = jh * jh * pv + l[:, t]
        k = pv * jh / s
        m = pm + k * (z[:, t] - hv)
        v_raw = pv * l[:, t] / s
        low = v_raw <= var_floor
        v = np.where(low, var_floor, v_raw)
        coef_f[:, t] = a
        coef_h[:, t] = b
        prior_mean[:, t] = pm
        prior_var[:, t] = pv
        gain[:, t] = k
        mean[:, t] = m
        var[:, t] = v
        floored[:, t] = low
    return coef_f, coef_h, prior_mean, prior_var, gain, mean, var, floored


def ekf_backward(z, l, lam, wf, bf, wh, bh, m0, v0, saved, g_mean, g_var, g_gain):
    coef_f, coef_h, prior_mean, prior_var, gain, mean, var, floored = saved
    B, T, K = z.shape
    gz = np.empty((B, T, K))
    gl = np.empty((B, T, K))
    g_lam = np.zeros(K)
    g_wf = np.zeros_like(wf)
    g_bf = np.zeros_like(bf)
    g_wh = np.zeros_like(wh)
    g_bh = np.zeros_like(bh)
    gm = np.zeros((B, K))
    gv = np.zeros((B, K))
    for t in range(T - 1, -1, -1):
        gm = gm + g_mean[:, t]
        gv = gv + g_var[:, t]
        a = coef_f[:, t]
        a1, a2 = a[:, K : 2 * K], a[:, 2 * K :]
        b = coef_h[:, t]
        b1, b2 = b[:, K : 2 * K], b[:, 2 * K :]
        pm, pv, k = prior_mean[:, t], prior_var[:, t], gain[:, t]
        m_prev = mean[:, t - 1] if t > 0 else m0
        v_prev = var[:, t - 1] if t > 0 else v0
        b0 = b[:, :K]
        hv = b0 + b1 * pm + b2 * pm * pm
        jh = b1 + 2.0 * b2 * pm
        jf = a1 + 2.0 * a2 * m_prev
        s = jh * jh * pv + l[:, t]

        gv_raw = np.where(floored[:, t], 0.0, gv)
        gk = g_gain[:, t] + gm * (z[:, t] - hv) - gv_raw * jh * pv
        g_jh = -gv_raw * k * pv
        g_pv = gv_raw * (1.0 - k * jh)
        gz[:, t] = gm * k
        g_pm = gm.copy()
        g_hv = -gm * k

        g_pv += gk * jh / s
        g_jh += gk * pv / s
        g_s = -gk * k / s
        g_jh += g_s * 2.0 * jh * pv
        g_pv += g_s * jh * jh
        gl[:, t] = g_s

        g_b0 = g_hv
        g_b1 = g_hv * pm + g_jh
        g_b2 = g_hv * pm * pm + g_jh * 2.0 * pm
        g_pm += g_hv * (b1 + 2.0 * b2 * pm) + g_jh * 2.0 * b2
        g_b = np.concatenate([g_b0, g_b1, g_b2], axis=1)
        g_wh += pm.T @ g_b
        g_bh += g_b.sum(axis=0)
        g_pm += g_b @ wh.T

        g_jf = g_pv * 2.0 * jf * v_prev
        g_lam += g_pv.sum(axis=0)
        gv = g_pv * jf * jf

        g_a0 = g_pm
        g_a1 = g_pm * m_prev + g_jf
        g_a2 = g_pm * m_prev * m_prev + g_jf * 2.0 * m_prev
        g_mp = g_pm * (a1 + 2.0 * a2 * m_prev) + g_jf * 2.0 * a2
        g_a = np.concatenate([g_a0, g_a1, g_a2], axis=1)
        g_wf += m_prev.T @ g_a
        g_bf += g_a.sum(axis=0)
        gm = g_mp + g_a @ wf.T
    return gz, gl, g_lam, g_wf, g_bf, g_wh, g_bh, gm, gv
