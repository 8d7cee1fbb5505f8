# Compiled row kernels; mirror _kernels_py.py exactly.
import numpy as np

from libc.math cimport exp, fabs, sqrt, tanh

cdef double GELU_K = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_C = 0.044715


def softmax_rows(const double[:, ::1] a, const unsigned char[:, ::1] mask=None):
    cdef Py_ssize_t rows = a.shape[0], n = a.shape[1], i, j, mr = 0
    cdef double mx, s, v
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    if mask is not None:
        mr = mask.shape[0]
    for i in range(rows):
        mx = -1e308
        if mr == 0:
            for j in range(n):
                if a[i, j] > mx:
                    mx = a[i, j]
            s = 0.0
            for j in range(n):
                v = exp(a[i, j] - mx)
                y[i, j] = v
                s += v
        else:
            for j in range(n):
                if mask[i % mr, j] and a[i, j] > mx:
                    mx = a[i, j]
            s = 0.0
            for j in range(n):
                if mask[i % mr, j]:
                    v = exp(a[i, j] - mx)
                else:
                    v = 0.0
                y[i, j] = v
                s += v
        s = 1.0 / s
        for j in range(n):
            y[i, j] *= s
    return out


def softmax_rows_backward(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], i, j
    cdef double dot
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] d = out
    for i in range(rows):
        dot = 0.0
        for j in range(n):
            dot += g[i, j] * y[i, j]
        for j in range(n):
            d[i, j] = y[i, j] * (g[i, j] - dot)
    return out


def layernorm_forward(const double[:, ::1] x, const double[::1] gain,
                      const double[::1] bias, double eps):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double mu, var, r, c
    out = np.empty((rows, n), dtype=np.float64)
    xh = np.empty((rows, n), dtype=np.float64)
    rs = np.empty(rows, dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xhat = xh
    cdef double[::1] rstd = rs
    for i in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            c = x[i, j] - mu
            var += c * c
        var /= n
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            c = (x[i, j] - mu) * r
            xhat[i, j] = c
            y[i, j] = c * gain[j] + bias[j]
    return out, xh, rs


def layernorm_backward(const double[:, ::1] g, const double[:, ::1] xhat,
                       const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t rows = g.shape[0], n = g.shape[1], i, j
    cdef double s1, s2, gx
    dxa = np.empty((rows, n), dtype=np.float64)
    dga = np.zeros(n, dtype=np.float64)
    dba = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] dx = dxa
    cdef double[::1] dg = dga
    cdef double[::1] db = dba
    for i in range(rows):
        s1 = 0.0
        s2 = 0.0
        for j in range(n):
            gx = g[i, j] * gain[j]
            s1 += gx
            s2 += gx * xhat[i, j]
            dg[j] += g[i, j] * xhat[i, j]
            db[j] += g[i, j]
        for j in range(n):
            gx = g[i, j] * gain[j]
            dx[i, j] = (rstd[i] / n) * (n * gx - s1 - xhat[i, j] * s2)
    return dxa, dga, dba


def gelu_forward(const double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double v
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    for i in range(rows):
        for j in range(n):
            v = x[i, j]
            y[i, j] = 0.5 * v * (1.0 + tanh(GELU_K * (v + GELU_C * v * v * v)))
    return out


def gelu_backward(const double[:, ::1] x, const double[:, ::1] g):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double v, t, du
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] d = out
    for i in range(rows):
        for j in range(n):
            v = x[i, j]
            t = tanh(GELU_K * (v + GELU_C * v * v * v))
            du = GELU_K * (1.0 + 3.0 * GELU_C * v * v)
            d[i, j] = g[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return out


def saturate_forward(const double[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    for i in range(rows):
        for j in range(n):
            y[i, j] = x[i, j] / (1.0 + fabs(x[i, j]))
    return out


def saturate_backward(const double[:, ::1] x, const double[:, ::1] g):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    cdef double d
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(rows):
        for j in range(n):
            d = 1.0 + fabs(x[i, j])
            o[i, j] = g[i, j] / (d * d)
    return out
