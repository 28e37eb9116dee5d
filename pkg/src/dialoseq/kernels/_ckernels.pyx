# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: fused softmax / layer-norm / ReLU / Adam.

Shapes mirror dialoseq.kernels.reference exactly; the reduced axis is the
last one and arrays are flattened to (rows, d) views internally.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

BACKEND = "cython"

ctypedef fused floating:
    float
    double


def _rows(a):
    a = np.ascontiguousarray(a)
    d = a.shape[a.ndim - 1]
    return a.reshape(-1, d)


# ---------------------------------------------------------------- softmax

cdef void _softmax_rows(floating[:, ::1] x, floating[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef floating m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            y[i, j] = exp(x[i, j] - m)
            s += y[i, j]
        for j in range(d):
            y[i, j] /= s


def softmax_fwd(x):
    xr = _rows(x)
    y = np.empty_like(xr)
    if xr.dtype == np.float32:
        _softmax_rows[float](xr, y)
    else:
        _softmax_rows[double](xr, y)
    return y.reshape(x.shape)


cdef void _softmax_bwd_rows(floating[:, ::1] y, floating[:, ::1] dy,
                            floating[:, ::1] dx) noexcept nogil:
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    cdef floating s
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += dy[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = (dy[i, j] - s) * y[i, j]


def softmax_bwd(y, dy):
    yr = _rows(y)
    dyr = _rows(dy)
    dx = np.empty_like(yr)
    if yr.dtype == np.float32:
        _softmax_bwd_rows[float](yr, dyr, dx)
    else:
        _softmax_bwd_rows[double](yr, dyr, dx)
    return dx.reshape(y.shape)


# --------------------------------------------------------------- layernorm

cdef void _ln_fwd_rows(floating[:, ::1] x, floating[::1] gain, floating[::1] bias,
                       double eps, floating[:, ::1] y, floating[::1] mean,
                       floating[::1] rstd) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef floating mu, var, dev, r
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            dev = x[i, j] - mu
            var += dev * dev
        var /= d
        r = <floating>(1.0 / sqrt(var + eps))
        mean[i] = mu
        rstd[i] = r
        for j in range(d):
            y[i, j] = (x[i, j] - mu) * r * gain[j] + bias[j]


def layernorm_fwd(x, gain, bias, eps):
    xr = _rows(x)
    gain = np.ascontiguousarray(gain)
    bias = np.ascontiguousarray(bias)
    y = np.empty_like(xr)
    mean = np.empty(xr.shape[0], dtype=xr.dtype)
    rstd = np.empty(xr.shape[0], dtype=xr.dtype)
    if xr.dtype == np.float32:
        _ln_fwd_rows[float](xr, gain, bias, eps, y, mean, rstd)
    else:
        _ln_fwd_rows[double](xr, gain, bias, eps, y, mean, rstd)
    keep = x.shape[:-1] + (1,)
    return y.reshape(x.shape), mean.reshape(keep), rstd.reshape(keep)


cdef void _ln_bwd_rows(floating[:, ::1] x, floating[::1] gain, floating[::1] mean,
                       floating[::1] rstd, floating[:, ::1] dy, floating[:, ::1] dx,
                       floating[::1] dgain, floating[::1] dbias) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef floating mu, r, xh, dxh, s1, s2
    for i in range(n):
        mu = mean[i]
        r = rstd[i]
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mu) * r
            dxh = dy[i, j] * gain[j]
            s1 += dxh
            s2 += dxh * xh
            dgain[j] += dy[i, j] * xh
            dbias[j] += dy[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            xh = (x[i, j] - mu) * r
            dx[i, j] = r * (dy[i, j] * gain[j] - s1 - xh * s2)


def layernorm_bwd(x, gain, mean, rstd, dy):
    xr = _rows(x)
    dyr = _rows(dy)
    gain = np.ascontiguousarray(gain)
    mean_r = np.ascontiguousarray(mean).reshape(-1)
    rstd_r = np.ascontiguousarray(rstd).reshape(-1)
    dx = np.empty_like(xr)
    dgain = np.zeros_like(gain)
    dbias = np.zeros_like(gain)
    if xr.dtype == np.float32:
        _ln_bwd_rows[float](xr, gain, mean_r, rstd_r, dyr, dx, dgain, dbias)
    else:
        _ln_bwd_rows[double](xr, gain, mean_r, rstd_r, dyr, dx, dgain, dbias)
    return dx.reshape(x.shape), dgain, dbias


# -------------------------------------------------------------------- relu

cdef void _relu_fwd_flat(floating[::1] x, floating[::1] y) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        y[i] = x[i] if x[i] > 0.0 else 0.0


def relu_fwd(x):
    xf = np.ascontiguousarray(x).reshape(-1)
    y = np.empty_like(xf)
    if xf.dtype == np.float32:
        _relu_fwd_flat[float](xf, y)
    else:
        _relu_fwd_flat[double](xf, y)
    return y.reshape(x.shape)


cdef void _relu_bwd_flat(floating[::1] x, floating[::1] dy,
                         floating[::1] dx) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        # branchless: multiply by the comparison mask
        dx[i] = dy[i] * <floating>(x[i] > 0.0)


def relu_bwd(x, dy):
    xf = np.ascontiguousarray(x).reshape(-1)
    dyf = np.ascontiguousarray(dy).reshape(-1)
    dx = np.empty_like(xf)
    if xf.dtype == np.float32:
        _relu_bwd_flat[float](xf, dyf, dx)
    else:
        _relu_bwd_flat[double](xf, dyf, dx)
    return dx.reshape(x.shape)


# -------------------------------------------------------------------- adam

cdef void _adam_flat(floating[::1] p, floating[::1] g, floating[::1] m,
                     floating[::1] v, double lr, double beta1, double beta2,
                     double eps, double bc1, double bc2) noexcept nogil:
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double mi, vi
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        m[i] = <floating>mi
        v[i] = <floating>vi
        p[i] -= <floating>(lr * (mi / bc1) / (sqrt(vi / bc2) + eps))


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    # p/m/v are mutated in place; the caller guarantees contiguity
    pf = p.reshape(-1)
    gf = np.ascontiguousarray(g).reshape(-1)
    mf = m.reshape(-1)
    vf = v.reshape(-1)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    if pf.dtype == np.float32:
        _adam_flat[float](pf, gf, mf, vf, lr, beta1, beta2, eps, bc1, bc2)
    else:
        _adam_flat[double](pf, gf, mf, vf, lr, beta1, beta2, eps, bc1, bc2)
