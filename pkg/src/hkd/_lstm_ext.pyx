# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled LSTM recurrence.  Same contract as hkd._lstm_py.

Elementwise passes run over contiguous spans so the C compiler can vectorise
them (tanh through libmvec); the recurrent product goes to BLAS.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport tanh, tanhf
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()


cdef inline void _gemm(char *ta, char *tb, int m, int n, int k,
                       floating *a, int lda, floating *b, int ldb,
                       floating beta, floating *c, int ldc) noexcept nogil:
    cdef float one_f = 1.0
    cdef double one_d = 1.0
    cdef float beta_f
    cdef double beta_d
    if floating is float:
        beta_f = beta
        sgemm(ta, tb, &m, &n, &k, &one_f, a, &lda, b, &ldb, &beta_f, c, &ldc)
    else:
        beta_d = beta
        dgemm(ta, tb, &m, &n, &k, &one_d, a, &lda, b, &ldb, &beta_d, c, &ldc)


cdef void _tanh_span(floating *out, floating *x, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t j
    if floating is float:
        for j in range(n):
            out[j] = tanhf(x[j])
    else:
        for j in range(n):
            out[j] = tanh(x[j])


cdef void _sigmoid_span(floating *out, floating *x, Py_ssize_t n) noexcept nogil:
    # sigma(x) = (tanh(x / 2) + 1) / 2, matching the numpy fallback
    cdef Py_ssize_t j
    for j in range(n):
        out[j] = 0.5 * x[j]
    _tanh_span(out, out, n)
    for j in range(n):
        out[j] = 0.5 * (out[j] + 1.0)


def recur_forward(floating[:, :, ::1] xp, floating[:, ::1] w_hh):
    cdef Py_ssize_t B = xp.shape[0], T = xp.shape[1], H4 = xp.shape[2]
    cdef Py_ssize_t H = H4 // 4
    dt = np.float32 if floating is float else np.float64
    h_arr = np.zeros((B, T, H), dtype=dt)
    c_arr = np.zeros((B, T, H), dtype=dt)
    tc_arr = np.zeros((B, T, H), dtype=dt)
    g_arr = np.empty((B, T, H4), dtype=dt)
    z_arr = np.empty((B, H4), dtype=dt)
    cdef floating[:, :, ::1] h = h_arr
    cdef floating[:, :, ::1] c = c_arr
    cdef floating[:, :, ::1] tc = tc_arr
    cdef floating[:, :, ::1] gates = g_arr
    cdef floating[:, ::1] z = z_arr
    cdef Py_ssize_t b, t, j
    cdef floating *gp
    cdef floating *zp
    cdef floating *cp
    cdef floating *cprev
    cdef floating *tp
    cdef floating *hp
    cdef char *nn = b"N"
    if B == 0 or T == 0:
        return h_arr, c_arr, g_arr, tc_arr
    with nogil:
        for t in range(T):
            for b in range(B):
                memcpy(&z[b, 0], &xp[b, t, 0], H4 * sizeof(floating))
            if t > 0:
                # z^T += W^T h_prev^T in column-major terms
                _gemm(nn, nn, <int>H4, <int>B, <int>H, &w_hh[0, 0], <int>H4,
                      &h[0, t - 1, 0], <int>(T * H), <floating>1.0, &z[0, 0], <int>H4)
            for b in range(B):
                gp = &gates[b, t, 0]
                zp = &z[b, 0]
                _sigmoid_span(gp, zp, 2 * H)
                _tanh_span(gp + 2 * H, zp + 2 * H, H)
                _sigmoid_span(gp + 3 * H, zp + 3 * H, H)
                cp = &c[b, t, 0]
                tp = &tc[b, t, 0]
                hp = &h[b, t, 0]
                if t > 0:
                    cprev = &c[b, t - 1, 0]
                    for j in range(H):
                        cp[j] = gp[H + j] * cprev[j] + gp[j] * gp[2 * H + j]
                else:
                    for j in range(H):
                        cp[j] = gp[j] * gp[2 * H + j]
                _tanh_span(tp, cp, H)
                for j in range(H):
                    hp[j] = gp[3 * H + j] * tp[j]
    return h_arr, c_arr, g_arr, tc_arr


def recur_backward(floating[:, :, ::1] gh, floating[:, ::1] w_hh,
                   floating[:, :, ::1] c, floating[:, :, ::1] gates,
                   floating[:, :, ::1] tanh_c):
    cdef Py_ssize_t B = gh.shape[0], T = gh.shape[1], H = gh.shape[2]
    cdef Py_ssize_t H4 = 4 * H
    dt = np.float32 if floating is float else np.float64
    dz_arr = np.empty((B, T, H4), dtype=dt)
    dhn_arr = np.zeros((B, H), dtype=dt)
    dcn_arr = np.zeros((B, H), dtype=dt)
    cdef floating[:, :, ::1] dz = dz_arr
    cdef floating[:, ::1] dh_next = dhn_arr
    cdef floating[:, ::1] dc_next = dcn_arr
    cdef Py_ssize_t b, t, j
    cdef floating *gp
    cdef floating *dp
    cdef floating *tp
    cdef floating *ghp
    cdef floating *dhp
    cdef floating *dcp
    cdef floating *cprev
    cdef floating dh, dc, cpv
    cdef char *tr = b"T"
    cdef char *nn = b"N"
    if B == 0 or T == 0:
        return dz_arr
    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                gp = &gates[b, t, 0]
                dp = &dz[b, t, 0]
                tp = &tanh_c[b, t, 0]
                ghp = &gh[b, t, 0]
                dhp = &dh_next[b, 0]
                dcp = &dc_next[b, 0]
                cprev = &c[b, t - 1, 0] if t > 0 else NULL
                for j in range(H):
                    dh = ghp[j] + dhp[j]
                    dc = dh * gp[3 * H + j] * (1 - tp[j] * tp[j]) + dcp[j]
                    cpv = cprev[j] if t > 0 else 0.0
                    dp[j] = dc * gp[2 * H + j] * gp[j] * (1 - gp[j])
                    dp[H + j] = dc * cpv * gp[H + j] * (1 - gp[H + j])
                    dp[2 * H + j] = dc * gp[j] * (1 - gp[2 * H + j] * gp[2 * H + j])
                    dp[3 * H + j] = dh * tp[j] * gp[3 * H + j] * (1 - gp[3 * H + j])
                    dcp[j] = dc * gp[H + j]
            # dh_next^T = W dz_t^T
            _gemm(tr, nn, <int>H, <int>B, <int>H4, &w_hh[0, 0], <int>H4,
                  &dz[0, t, 0], <int>(T * H4), <floating>0.0, &dh_next[0, 0], <int>H)
    return dz_arr
