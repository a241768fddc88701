# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``; same signatures, same results."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, isnan

cnp.import_array()

ctypedef fused floating:
    float
    double

cdef enum:
    WHITE = 0
    BLACK = 1
    BLUE = 2
    GREEN = 3
    RED = 4
    SLOT = 11


def col2im(const floating[:, :, :, :, :, :] dcols, int Hp, int Wp, int stride):
    cdef Py_ssize_t N = dcols.shape[0], Ho = dcols.shape[1], Wo = dcols.shape[2]
    cdef Py_ssize_t k = dcols.shape[3], C = dcols.shape[5]
    cdef Py_ssize_t n, i, j, ki, kj, c, r0, c0
    if floating is float:
        out_arr = np.zeros((N, Hp, Wp, C), dtype=np.float32)
    else:
        out_arr = np.zeros((N, Hp, Wp, C), dtype=np.float64)
    cdef floating[:, :, :, ::1] out = out_arr
    with nogil:
        for n in range(N):
            for i in range(Ho):
                r0 = i * stride
                for j in range(Wo):
                    c0 = j * stride
                    for ki in range(k):
                        for kj in range(k):
                            for c in range(C):
                                out[n, r0 + ki, c0 + kj, c] += dcols[n, i, j, ki, kj, c]
    return out_arr


def maxpool_forward(const floating[:, :, :, :] xp, int k, int stride):
    cdef Py_ssize_t N = xp.shape[0], Hp = xp.shape[1], Wp = xp.shape[2], C = xp.shape[3]
    cdef Py_ssize_t Ho = (Hp - k) // stride + 1, Wo = (Wp - k) // stride + 1
    cdef Py_ssize_t n, i, j, c, ki, kj, best_idx
    cdef floating best, v
    if floating is float:
        out_arr = np.empty((N, Ho, Wo, C), dtype=np.float32)
    else:
        out_arr = np.empty((N, Ho, Wo, C), dtype=np.float64)
    arg_arr = np.empty((N, Ho, Wo, C), dtype=np.int32)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef int[:, :, :, ::1] arg = arg_arr
    with nogil:
        for n in range(N):
            for i in range(Ho):
                for j in range(Wo):
                    for c in range(C):
                        best = xp[n, i * stride, j * stride, c]
                        best_idx = 0
                        for ki in range(k):
                            for kj in range(k):
                                v = xp[n, i * stride + ki, j * stride + kj, c]
                                if v > best:
                                    best = v
                                    best_idx = ki * k + kj
                        out[n, i, j, c] = best
                        arg[n, i, j, c] = <int>best_idx
    return out_arr, arg_arr


def maxpool_backward(const floating[:, :, :, :] dout, const int[:, :, :, :] arg, int Hp, int Wp,
                     int k, int stride):
    cdef Py_ssize_t N = dout.shape[0], Ho = dout.shape[1], Wo = dout.shape[2], C = dout.shape[3]
    cdef Py_ssize_t n, i, j, c, idx
    if floating is float:
        dxp_arr = np.zeros((N, Hp, Wp, C), dtype=np.float32)
    else:
        dxp_arr = np.zeros((N, Hp, Wp, C), dtype=np.float64)
    cdef floating[:, :, :, ::1] dxp = dxp_arr
    with nogil:
        for n in range(N):
            for i in range(Ho):
                for j in range(Wo):
                    for c in range(C):
                        idx = arg[n, i, j, c]
                        dxp[n, i * stride + idx // k, j * stride + idx % k, c] += dout[n, i, j, c]
    return dxp_arr


def lasso_cd(const double[:, ::1] Xt, const double[::1] y, const double[::1] pen, beta_in, double tol,
             int max_sweeps):
    cdef Py_ssize_t K = Xt.shape[0], N = Xt.shape[1]
    cdef Py_ssize_t k, i
    cdef int sweep
    beta_arr = np.array(beta_in, dtype=np.float64, copy=True)
    cdef double[::1] beta = beta_arr
    r_arr = np.asarray(y, dtype=np.float64) - np.asarray(Xt).T @ beta_arr
    cdef double[::1] r = r_arr
    col_sq_arr = np.einsum("kn,kn->k", np.asarray(Xt), np.asarray(Xt)) / N
    cdef double[::1] col_sq = col_sq_arr
    cdef double max_change = 1e300, rho, new, d
    for sweep in range(max_sweeps):
        max_change = 0.0
        for k in range(K):
            if col_sq[k] == 0.0:
                if beta[k] != 0.0:
                    if fabs(beta[k]) > max_change:
                        max_change = fabs(beta[k])
                    beta[k] = 0.0
                continue
            rho = 0.0
            for i in range(N):
                rho += Xt[k, i] * r[i]
            rho = rho / N + col_sq[k] * beta[k]
            if rho > pen[k]:
                new = (rho - pen[k]) / col_sq[k]
            elif rho < -pen[k]:
                new = (rho + pen[k]) / col_sq[k]
            else:
                new = 0.0
            d = new - beta[k]
            if d != 0.0:
                for i in range(N):
                    r[i] -= d * Xt[k, i]
                beta[k] = new
                if fabs(d) > max_change:
                    max_change = fabs(d)
        if max_change < tol:
            return beta_arr, sweep + 1, max_change, True
    return beta_arr, max_sweeps, max_change, False


def filter_rule(const double[:, :] close, double x):
    cdef Py_ssize_t S = close.shape[0], T = close.shape[1], s, t
    out_arr = np.full((S, T), np.nan)
    cdef double[:, ::1] out = out_arr
    cdef int state
    cdef double peak, trough, p
    cdef bint started
    with nogil:
        for s in range(S):
            state = 0
            started = False
            peak = 0.0
            trough = 0.0
            for t in range(T):
                p = close[s, t]
                if isnan(p):
                    continue
                if not started:
                    peak = p
                    trough = p
                    started = True
                if state != 1 and p >= trough * (1.0 + x):
                    state = 1
                    peak = p
                elif state != -1 and p <= peak * (1.0 - x):
                    state = -1
                    trough = p
                if p > peak:
                    peak = p
                if p < trough:
                    trough = p
                out[s, t] = state
    return out_arr


cdef inline int _round_div(int a, int n) nogil:
    return (2 * a + n) // (2 * n)


cdef void _draw_line(unsigned char[:, :] img, int r0, int c0, int r1, int c1,
                     unsigned char label) noexcept nogil:
    cdef int dr = r1 - r0, dc = c1 - c0
    cdef int adr = dr if dr >= 0 else -dr
    cdef int adc = dc if dc >= 0 else -dc
    cdef int n = adr if adr > adc else adc
    cdef int i, r, c
    if n == 0:
        img[r0, c0] = label
        return
    for i in range(n + 1):
        r = r0 + _round_div(i * adr, n) if dr >= 0 else r0 - _round_div(i * adr, n)
        c = c0 + _round_div(i * adc, n) if dc >= 0 else c0 - _round_div(i * adc, n)
        img[r, c] = label


def rasterize(const int[:, ::1] r_open, const int[:, ::1] r_close, const int[:, ::1] r_high,
              const int[:, ::1] r_low, const int[:, ::1] r_ma, const int[:, ::1] vol_h,
              const unsigned char[:, ::1] up, bint draw_ma, bint draw_vol, int height):
    cdef Py_ssize_t N = r_open.shape[0], D = r_open.shape[1]
    img_arr = np.zeros((N, height, SLOT * D), dtype=np.uint8)
    cdef unsigned char[:, :, ::1] img = img_arr
    cdef Py_ssize_t n, d, r, c, cc
    cdef int bottom = height - 1
    cdef unsigned char col
    with nogil:
        for n in range(N):
            for d in range(D):
                c = SLOT * d
                if draw_vol and vol_h[n, d] > 0:
                    col = GREEN if up[n, d] else RED
                    for r in range(bottom - vol_h[n, d] + 1, bottom + 1):
                        for cc in range(c, c + SLOT):
                            img[n, r, cc] = col
            if draw_ma:
                for d in range(D):
                    if d == 0:
                        img[n, r_ma[n, 0], 5] = BLUE
                    else:
                        _draw_line(img[n], r_ma[n, d - 1], SLOT * (d - 1) + 5,
                                   r_ma[n, d], SLOT * d + 5, BLUE)
            for d in range(D):
                c = SLOT * d
                for r in range(r_high[n, d], r_low[n, d] + 1):
                    img[n, r, c + 5] = BLACK
                for cc in range(c, c + 5):
                    img[n, r_open[n, d], cc] = BLACK
                for cc in range(c + 6, c + 11):
                    img[n, r_close[n, d], cc] = BLACK
    return img_arr
