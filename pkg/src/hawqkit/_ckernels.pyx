# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``.

Results match the numpy fallback bit-for-bit: im2col is a pure copy and
col2im accumulates each output element in (ki, kj) order like the fallback.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs, copysign, fmin, fmax

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n * oh * ow, c * kh * kw), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, ci, i, j, r, s, row, col, hi, wi
    with nogil:
        for b in range(n):
            for r in range(oh):
                for s in range(ow):
                    row = (b * oh + r) * ow + s
                    col = 0
                    for ci in range(c):
                        for i in range(kh):
                            hi = r * stride + i - pad
                            for j in range(kw):
                                wi = s * stride + j - pad
                                if 0 <= hi < h and 0 <= wi < w:
                                    out[row, col] = x[b, ci, hi, wi]
                                col += 1
    return out_arr


def col2im(cols, tuple x_shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef const double[:, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64).reshape(
        n * oh * ow, c * kh * kw)
    out_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, i, j, r, s, row, hi, wi
    with nogil:
        for b in range(n):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        for r in range(oh):
                            hi = r * stride + i - pad
                            if hi < 0 or hi >= h:
                                continue
                            for s in range(ow):
                                wi = s * stride + j - pad
                                if 0 <= wi < w:
                                    row = (b * oh + r) * ow + s
                                    out[b, ci, hi, wi] += cv[row, (ci * kh + i) * kw + j]
    return out_arr


def quantize_symmetric(z, double scale, double levels):
    arr = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[::1] src = arr.reshape(-1)
    res = np.empty(arr.shape, dtype=np.float64)
    cdef double[::1] dst = res.reshape(-1)
    cdef Py_ssize_t k, m = src.shape[0]
    cdef double q
    with nogil:
        for k in range(m):
            q = src[k] / scale
            q = copysign(floor(fabs(q) + 0.5), q)
            dst[k] = fmax(-levels, fmin(levels, q)) * scale
    return res


def quantize_sign(z, double scale):
    arr = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[::1] src = arr.reshape(-1)
    res = np.empty(arr.shape, dtype=np.float64)
    cdef double[::1] dst = res.reshape(-1)
    cdef Py_ssize_t k, m = src.shape[0]
    with nogil:
        for k in range(m):
            dst[k] = scale if src[k] >= 0 else -scale
    return res


def clip_mask(z, double clip_max):
    arr = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[::1] src = arr.reshape(-1)
    res = np.empty(arr.shape, dtype=np.float64)
    cdef double[::1] dst = res.reshape(-1)
    cdef Py_ssize_t k, m = src.shape[0]
    with nogil:
        for k in range(m):
            dst[k] = 1.0 if fabs(src[k]) <= clip_max else 0.0
    return res
