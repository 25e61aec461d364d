# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused elementwise and row-wise kernels for the transformer++ block.

Each function takes C-contiguous 1-D (elementwise) or 2-D (row-wise) arrays
of float32 or float64 and returns freshly allocated outputs.  Accumulation is
done in double precision.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport erf, exp, expf, sqrt

cnp.import_array()

cdef double SQRT_HALF = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


cdef inline double _sigmoid(double x) nogil:
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    cdef double e = exp(x)
    return e / (1.0 + e)


cdef inline float _sigmoidf(float x) nogil:
    # single precision twin; expf is several times cheaper than exp
    cdef float e = expf(-x if x >= 0 else x)
    return 1.0 / (1.0 + e) if x >= 0 else e / (1.0 + e)


def gelu_forward(floating[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] y = out
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            y[i] = 0.5 * v * (1.0 + erf(v * SQRT_HALF))
    return out


def gelu_backward(floating[::1] x, floating[::1] dy):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.asarray(x).dtype)
    cdef floating[::1] dx = out
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            dx[i] = dy[i] * (0.5 * (1.0 + erf(v * SQRT_HALF)) + v * exp(-0.5 * v * v) * INV_SQRT_2PI)
    return out


def swiglu_gate_forward(floating[::1] a, floating[::1] g):
    cdef Py_ssize_t i, n = a.shape[0]
    out = np.empty(n, dtype=np.asarray(a).dtype)
    cdef floating[::1] u = out
    cdef double v
    with nogil:
        for i in range(n):
            v = a[i]
            if floating is float:
                u[i] = v * _sigmoidf(a[i]) * g[i]
            else:
                u[i] = v * _sigmoid(v) * g[i]
    return out


def swiglu_gate_backward(floating[::1] a, floating[::1] g, floating[::1] du):
    cdef Py_ssize_t i, n = a.shape[0]
    dt = np.asarray(a).dtype
    out_a = np.empty(n, dtype=dt)
    out_g = np.empty(n, dtype=dt)
    cdef floating[::1] da = out_a
    cdef floating[::1] dg = out_g
    cdef double v, s
    with nogil:
        for i in range(n):
            v = a[i]
            if floating is float:
                s = _sigmoidf(a[i])
            else:
                s = _sigmoid(v)
            dg[i] = du[i] * v * s
            da[i] = du[i] * g[i] * (s + v * s * (1.0 - s))
    return out_a, out_g


def softmax_rows(floating[:, ::1] s):
    # shift by the row max in C, exponentiate with numpy's vectorized exp, normalize in C
    cdef Py_ssize_t r, j, rows = s.shape[0], cols = s.shape[1]
    out = np.empty((rows, cols), dtype=np.asarray(s).dtype)
    cdef floating[:, ::1] p = out
    cdef double m, tot, inv
    with nogil:
        for r in range(rows):
            m = s[r, 0]
            for j in range(1, cols):
                if s[r, j] > m:
                    m = s[r, j]
            for j in range(cols):
                p[r, j] = s[r, j] - m
    np.exp(out, out=out)
    with nogil:
        for r in range(rows):
            tot = 0.0
            for j in range(cols):
                tot += p[r, j]
            inv = 1.0 / tot
            for j in range(cols):
                p[r, j] = p[r, j] * inv
    return out


def softmax_rows_backward(floating[:, ::1] p, floating[:, ::1] dp, double scale):
    cdef Py_ssize_t r, j, rows = p.shape[0], cols = p.shape[1]
    out = np.empty((rows, cols), dtype=np.asarray(p).dtype)
    cdef floating[:, ::1] ds = out
    cdef double dot
    with nogil:
        for r in range(rows):
            dot = 0.0
            for j in range(cols):
                dot += dp[r, j] * p[r, j]
            for j in range(cols):
                ds[r, j] = p[r, j] * (dp[r, j] - dot) * scale
    return out


def layer_norm_rows(floating[:, ::1] x, floating[::1] scale, floating[::1] shift, double eps):
    cdef Py_ssize_t r, j, rows = x.shape[0], d = x.shape[1]
    dt = np.asarray(x).dtype
    out_y = np.empty((rows, d), dtype=dt)
    out_xhat = np.empty((rows, d), dtype=dt)
    out_rstd = np.empty((rows, 1), dtype=dt)
    cdef floating[:, ::1] y = out_y
    cdef floating[:, ::1] xhat = out_xhat
    cdef floating[:, ::1] rstd = out_rstd
    cdef double mu, var, c, rs
    with nogil:
        for r in range(rows):
            mu = 0.0
            for j in range(d):
                mu += x[r, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[r, j] - mu
                var += c * c
            var /= d
            rs = 1.0 / sqrt(var + eps)
            rstd[r, 0] = rs
            for j in range(d):
                c = (x[r, j] - mu) * rs
                xhat[r, j] = c
                y[r, j] = c * scale[j] + shift[j]
    return out_y, out_xhat, out_rstd


def layer_norm_rows_backward(floating[:, ::1] dy, floating[:, ::1] xhat, floating[:, ::1] rstd,
                             floating[::1] scale):
    cdef Py_ssize_t r, j, rows = dy.shape[0], d = dy.shape[1]
    dt = np.asarray(dy).dtype
    out_dx = np.empty((rows, d), dtype=dt)
    acc_scale = np.zeros(d, dtype=np.float64)
    acc_shift = np.zeros(d, dtype=np.float64)
    cdef floating[:, ::1] dx = out_dx
    cdef double[::1] dscale = acc_scale
    cdef double[::1] dshift = acc_shift
    cdef double mg, mgx, gj
    with nogil:
        for r in range(rows):
            mg = 0.0
            mgx = 0.0
            for j in range(d):
                gj = dy[r, j] * scale[j]
                mg += gj
                mgx += gj * xhat[r, j]
                dscale[j] += dy[r, j] * xhat[r, j]
                dshift[j] += dy[r, j]
            mg /= d
            mgx /= d
            for j in range(d):
                dx[r, j] = rstd[r, 0] * (dy[r, j] * scale[j] - mg - xhat[r, j] * mgx)
    return out_dx, acc_scale.astype(dt), acc_shift.astype(dt)
