# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row/elementwise kernels. Same API as :mod:`fact._pykernels`, equal up to float rounding."""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport erf, erff, exp, expf, sqrt, sqrtf, M_SQRT1_2

cnp.import_array()

cdef double INV_SQRT_2PI = 0.3989422804014327


def gelu_forward(floating[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float32 if floating is float else np.float64)
    cdef floating[::1] o = out
    cdef double v
    cdef float vf
    with nogil:
        if floating is float:
            for i in range(n):
                vf = x[i]
                o[i] = 0.5 * vf * (1.0 + erff(vf * <float>M_SQRT1_2))
        else:
            for i in range(n):
                v = x[i]
                o[i] = 0.5 * v * (1.0 + erf(v * M_SQRT1_2))
    return out


def gelu_backward(floating[::1] x, floating[::1] g):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float32 if floating is float else np.float64)
    cdef floating[::1] o = out
    cdef double v, cdf, pdf
    cdef float vf, cdff, pdff
    with nogil:
        if floating is float:
            for i in range(n):
                vf = x[i]
                cdff = 0.5 * (1.0 + erff(vf * <float>M_SQRT1_2))
                pdff = <float>INV_SQRT_2PI * expf(-0.5 * vf * vf)
                o[i] = g[i] * (cdff + vf * pdff)
        else:
            for i in range(n):
                v = x[i]
                cdf = 0.5 * (1.0 + erf(v * M_SQRT1_2))
                pdf = INV_SQRT_2PI * exp(-0.5 * v * v)
                o[i] = g[i] * (cdf + v * pdf)
    return out


def softmax_forward(floating[:, ::1] a):
    cdef Py_ssize_t r, c, rows = a.shape[0], cols = a.shape[1]
    out = np.empty((rows, cols), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] o = out
    cdef floating m, e, total
    with nogil:
        for r in range(rows):
            m = a[r, 0]
            for c in range(1, cols):
                if a[r, c] > m:
                    m = a[r, c]
            total = 0
            for c in range(cols):
                if floating is float:
                    e = expf(a[r, c] - m)
                else:
                    e = exp(a[r, c] - m)
                o[r, c] = e
                total = total + e
            total = 1 / total
            for c in range(cols):
                o[r, c] = o[r, c] * total
    return out


def softmax_backward(floating[:, ::1] y, floating[:, ::1] g):
    cdef Py_ssize_t r, c, rows = y.shape[0], cols = y.shape[1]
    out = np.empty((rows, cols), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] o = out
    cdef double dot
    with nogil:
        for r in range(rows):
            dot = 0.0
            for c in range(cols):
                dot = dot + g[r, c] * y[r, c]
            for c in range(cols):
                o[r, c] = <floating>(y[r, c] * (g[r, c] - dot))
    return out


def layernorm_forward(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta, double eps):
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    dt = np.float32 if floating is float else np.float64
    out = np.empty((rows, cols), dtype=dt)
    xhat = np.empty((rows, cols), dtype=dt)
    rstd = np.empty(rows, dtype=dt)
    cdef floating[:, ::1] o = out
    cdef floating[:, ::1] xh = xhat
    cdef floating[::1] rs = rstd
    cdef double mean, var, d, inv
    with nogil:
        for r in range(rows):
            mean = 0.0
            for c in range(cols):
                mean = mean + x[r, c]
            mean = mean / cols
            var = 0.0
            for c in range(cols):
                d = x[r, c] - mean
                var = var + d * d
            inv = 1.0 / sqrt(var / cols + eps)
            rs[r] = <floating>inv
            for c in range(cols):
                d = (x[r, c] - mean) * inv
                xh[r, c] = <floating>d
                o[r, c] = <floating>(d * gamma[c] + beta[c])
    return out, xhat, rstd


def layernorm_backward(floating[:, ::1] g, floating[:, ::1] xhat, floating[::1] rstd,
                       floating[::1] gamma):
    cdef Py_ssize_t r, c, rows = g.shape[0], cols = g.shape[1]
    dt = np.float32 if floating is float else np.float64
    dx = np.empty((rows, cols), dtype=dt)
    dgamma_acc = np.zeros(cols, dtype=np.float64)
    dbeta_acc = np.zeros(cols, dtype=np.float64)
    cdef floating[:, ::1] out = dx
    cdef double[::1] dgam = dgamma_acc
    cdef double[::1] dbet = dbeta_acc
    cdef double s1, s2, gh
    with nogil:
        for r in range(rows):
            s1 = 0.0
            s2 = 0.0
            for c in range(cols):
                gh = g[r, c] * gamma[c]
                s1 = s1 + gh
                s2 = s2 + gh * xhat[r, c]
                dgam[c] = dgam[c] + g[r, c] * xhat[r, c]
                dbet[c] = dbet[c] + g[r, c]
            s1 = s1 / cols
            s2 = s2 / cols
            for c in range(cols):
                gh = g[r, c] * gamma[c]
                out[r, c] = <floating>(rstd[r] * (gh - s1 - xhat[r, c] * s2))
    return dx, dgamma_acc.astype(dt), dbeta_acc.astype(dt)


def adamw_update(floating[::1] p, floating[::1] g, floating[::1] m, floating[::1] v,
                 double lr, double beta1, double beta2, double eps, double weight_decay,
                 long step):
    """In-place AdamW step; ``step`` is 1-based."""
    cdef Py_ssize_t i, n = p.shape[0]
    cdef floating b1 = beta1, b2 = beta2, c1 = 1.0 - beta1, c2 = 1.0 - beta2
    cdef floating inv_bc1 = 1.0 / (1.0 - beta1 ** step)
    cdef floating inv_bc2 = 1.0 / (1.0 - beta2 ** step)
    cdef floating lr_t = lr, wd = weight_decay, e = eps
    cdef floating mi, vi, gi
    with nogil:
        for i in range(n):
            gi = g[i]
            mi = b1 * m[i] + c1 * gi
            vi = b2 * v[i] + c2 * gi * gi
            m[i] = mi
            v[i] = vi
            if floating is float:
                p[i] = p[i] - lr_t * ((mi * inv_bc1) / (sqrtf(vi * inv_bc2) + e) + wd * p[i])
            else:
                p[i] = p[i] - lr_t * ((mi * inv_bc1) / (sqrt(vi * inv_bc2) + e) + wd * p[i])
