"""Pure numpy LSTM recurrence; reference for the compiled kernel.

Gate blocks along the last axis of the 4H projections are ordered
input, forget, cell, output.
"""

import numpy as np


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def recur_forward(xp, w_hh):
    """Run the recurrence given input projections ``xp`` (B, T, 4H).

    Returns (h, c, gates, tanh_c); ``gates`` holds activated gate values.
    """
    B, T, H4 = xp.shape
    H = H4 // 4
    dt = xp.dtype
    h = np.zeros((B, T, H), dtype=dt)
    c = np.zeros((B, T, H), dtype=dt)
    tanh_c = np.zeros((B, T, H), dtype=dt)
    gates = np.empty((B, T, H4), dtype=dt)
    h_prev = np.zeros((B, H), dtype=dt)
    c_prev = np.zeros((B, H), dtype=dt)
    for t in range(T):
        z = xp[:, t, :] + h_prev @ w_hh
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = _sigmoid(z[:, 3 * H :])
        c_t = f * c_prev + i * g
        tc = np.tanh(c_t)
        h_t = o * tc
        gates[:, t, :H] = i
        gates[:, t, H : 2 * H] = f
        gates[:, t, 2 * H : 3 * H] = g
        gates[:, t, 3 * H :] = o
        c[:, t] = c_t
        tanh_c[:, t] = tc
        h[:, t] = h_t
        h_prev, c_prev = h_t, c_t
    return h, c, gates, tanh_c


def recur_backward(gh, w_hh, c, gates, tanh_c):
    """Backpropagate ``gh`` (B, T, H) through time; returns dz (B, T, 4H)."""
    B, T, H = gh.shape
    dt = gh.dtype
    dz = np.empty((B, T, 4 * H), dtype=dt)
    dh_next = np.zeros((B, H), dtype=dt)
    dc_next = np.zeros((B, H), dtype=dt)
    zeros = np.zeros((B, H), dtype=dt)
    for t in range(T - 1, -1, -1):
        i = gates[:, t, :H]
        f = gates[:, t, H : 2 * H]
        g = gates[:, t, 2 * H : 3 * H]
        o = gates[:, t, 3 * H :]
        tc = tanh_c[:, t]
        c_prev = c[:, t - 1] if t > 0 else zeros
        dh = gh[:, t] + dh_next
        do = dh * tc
        dc = dh * o * (1 - tc * tc) + dc_next
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc_next = dc * f
        dz[:, t, :H] = di * i * (1 - i)
        dz[:, t, H : 2 * H] = df * f * (1 - f)
        dz[:, t, 2 * H : 3 * H] = dg * (1 - g * g)
        dz[:, t, 3 * H :] = do * o * (1 - o)
        dh_next = dz[:, t] @ w_hh.T
    return dz
