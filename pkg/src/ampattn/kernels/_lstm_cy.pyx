# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled LSTM recurrence: one BLAS gemm per step, fused gate loops."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sigmoid(double x) noexcept nogil:
    return 1.0 / (1.0 + exp(-x))


cdef inline double _tanh(double x) noexcept nogil:
    # glibc tanh is several times slower than exp
    return 1.0 - 2.0 / (exp(2.0 * x) + 1.0)


def lstm_forward(double[:, :, ::1] pre, double[:, ::1] w_hh):
    cdef int steps = pre.shape[0], bsz = pre.shape[1], four_h = pre.shape[2]
    cdef int hidden = four_h // 4
    hs_arr = np.zeros((steps, bsz, hidden))
    cs_arr = np.zeros((steps, bsz, hidden))
    acts_arr = np.array(pre, copy=True)
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] cs = cs_arr
    cdef double[:, :, ::1] acts = acts_arr
    cdef int t, b, k
    cdef double one = 1.0, iv, fv, gv, ov, c_prev, c
    cdef char n = b'N'
    with nogil:
        for t in range(steps):
            if t > 0:
                # acts[t] (col-major 4H x B) += W_hh^T (4H x H) . h_{t-1}^T (H x B)
                dgemm(&n, &n, &four_h, &bsz, &hidden, &one, &w_hh[0, 0], &four_h,
                      &hs[t - 1, 0, 0], &hidden, &one, &acts[t, 0, 0], &four_h)
            for b in range(bsz):
                for k in range(hidden):
                    iv = _sigmoid(acts[t, b, k])
                    fv = _sigmoid(acts[t, b, hidden + k])
                    gv = _tanh(acts[t, b, 2 * hidden + k])
                    ov = _sigmoid(acts[t, b, 3 * hidden + k])
                    acts[t, b, k] = iv
                    acts[t, b, hidden + k] = fv
                    acts[t, b, 2 * hidden + k] = gv
                    acts[t, b, 3 * hidden + k] = ov
                    c_prev = cs[t - 1, b, k] if t > 0 else 0.0
                    c = fv * c_prev + iv * gv
                    cs[t, b, k] = c
                    hs[t, b, k] = ov * _tanh(c)
    return hs_arr, cs_arr, acts_arr


def lstm_backward(double[:, :, ::1] dhs, double[:, :, ::1] cs, double[:, :, ::1] acts,
                  double[:, ::1] w_hh):
    cdef int steps = dhs.shape[0], bsz = dhs.shape[1], hidden = dhs.shape[2]
    cdef int four_h = 4 * hidden
    dpre_arr = np.empty((steps, bsz, four_h))
    cdef double[:, :, ::1] dpre = dpre_arr
    cdef double[:, ::1] dh_next = np.zeros((bsz, hidden))
    cdef double[:, ::1] dc_next = np.zeros((bsz, hidden))
    cdef int t, b, k
    cdef double one = 1.0, zero = 0.0
    cdef double iv, fv, gv, ov, c, c_prev, tc, dh, dc
    cdef char n = b'N', tr = b'T'
    with nogil:
        for t in range(steps - 1, -1, -1):
            for b in range(bsz):
                for k in range(hidden):
                    iv = acts[t, b, k]
                    fv = acts[t, b, hidden + k]
                    gv = acts[t, b, 2 * hidden + k]
                    ov = acts[t, b, 3 * hidden + k]
                    c = cs[t, b, k]
                    c_prev = cs[t - 1, b, k] if t > 0 else 0.0
                    tc = _tanh(c)
                    dh = dhs[t, b, k] + dh_next[b, k]
                    dc = dc_next[b, k] + dh * ov * (1.0 - tc * tc)
                    dpre[t, b, k] = dc * gv * iv * (1.0 - iv)
                    dpre[t, b, hidden + k] = dc * c_prev * fv * (1.0 - fv)
                    dpre[t, b, 2 * hidden + k] = dc * iv * (1.0 - gv * gv)
                    dpre[t, b, 3 * hidden + k] = dh * tc * ov * (1.0 - ov)
                    dc_next[b, k] = dc * fv
            # dh_next (col-major H x B) = W_hh (H x 4H) . dpre_t^T (4H x B)
            dgemm(&tr, &n, &hidden, &bsz, &four_h, &one, &w_hh[0, 0], &four_h,
                  &dpre[t, 0, 0], &four_h, &zero, &dh_next[0, 0], &hidden)
    return dpre_arr
