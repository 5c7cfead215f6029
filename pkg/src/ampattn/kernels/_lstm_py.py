"""Reference numpy implementation of the LSTM recurrence."""

import numpy as np
from scipy.special import expit


def lstm_forward(pre, w_hh):
    steps, bsz, four_h = pre.shape
    hidden = four_h // 4
    hs = np.empty((steps, bsz, hidden))
    cs = np.empty((steps, bsz, hidden))
    acts = np.empty((steps, bsz, four_h))
    h = np.zeros((bsz, hidden))
    c = np.zeros((bsz, hidden))
    for t in range(steps):
        z = pre[t] + h @ w_hh
        a = acts[t]
        a[:, : 2 * hidden] = expit(z[:, : 2 * hidden])
        a[:, 2 * hidden: 3 * hidden] = np.tanh(z[:, 2 * hidden: 3 * hidden])
        a[:, 3 * hidden:] = expit(z[:, 3 * hidden:])
        i, f, g, o = np.split(a, 4, axis=1)
        c = f * c + i * g
        h = o * np.tanh(c)
        cs[t] = c
        hs[t] = h
    return hs, cs, acts


def lstm_backward(dhs, cs, acts, w_hh):
    steps, bsz, hidden = dhs.shape
    dpre = np.empty((steps, bsz, 4 * hidden))
    dh_next = np.zeros((bsz, hidden))
    dc_next = np.zeros((bsz, hidden))
    for t in range(steps - 1, -1, -1):
        i, f, g, o = np.split(acts[t], 4, axis=1)
        c = cs[t]
        c_prev = cs[t - 1] if t > 0 else np.zeros_like(c)
        tc = np.tanh(c)
        dh = dhs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        d = dpre[t]
        d[:, :hidden] = dc * g * i * (1.0 - i)
        d[:, hidden: 2 * hidden] = dc * c_prev * f * (1.0 - f)
        d[:, 2 * hidden: 3 * hidden] = dc * i * (1.0 - g * g)
        d[:, 3 * hidden:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = d @ w_hh.T
    return dpre
