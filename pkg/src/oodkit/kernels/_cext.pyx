# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled patch-assembly kernels for the convolution hot path.

Zero padding is virtual: out-of-bounds taps read as zero in im2col and are
dropped in col2im, so no padded copies of the input are ever materialized.
Mirrors ``numpy_impl`` exactly, including the col2im accumulation order
(kernel offsets outermost), so both backends yield bit-identical float32
results.
"""

import numpy as np

cimport numpy as cnp

NAME = "cython"


def im2col(cnp.float32_t[:, :, :, ::1] x, int kh, int kw, int stride, int pad,
           int out_h, int out_w):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t c = x.shape[1]
    cdef Py_ssize_t h = x.shape[2]
    cdef Py_ssize_t w = x.shape[3]
    out = np.empty((n * out_h * out_w, c * kh * kw), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] cols = out
    cdef Py_ssize_t ni, ci, oh, ow, ki, kj, row, base, iy, ix
    with nogil:
        for ni in range(n):
            for oh in range(out_h):
                for ow in range(out_w):
                    row = (ni * out_h + oh) * out_w + ow
                    for ci in range(c):
                        base = ci * kh * kw
                        for ki in range(kh):
                            iy = oh * stride + ki - pad
                            for kj in range(kw):
                                ix = ow * stride + kj - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    cols[row, base + ki * kw + kj] = x[ni, ci, iy, ix]
                                else:
                                    cols[row, base + ki * kw + kj] = 0.0
    return out


def col2im(cnp.float32_t[:, ::1] cols, Py_ssize_t n, Py_ssize_t c,
           Py_ssize_t h, Py_ssize_t w, int kh, int kw, int stride, int pad,
           int out_h, int out_w):
    out = np.zeros((n, c, h, w), dtype=np.float32)
    cdef cnp.float32_t[:, :, :, ::1] dx = out
    cdef Py_ssize_t ni, ci, oh, ow, ki, kj, row, base, iy, ix
    with nogil:
        for ki in range(kh):
            for kj in range(kw):
                for ni in range(n):
                    for ci in range(c):
                        base = ci * kh * kw + ki * kw + kj
                        for oh in range(out_h):
                            iy = oh * stride + ki - pad
                            if iy < 0 or iy >= h:
                                continue
                            row = (ni * out_h + oh) * out_w
                            for ow in range(out_w):
                                ix = ow * stride + kj - pad
                                if 0 <= ix < w:
                                    dx[ni, ci, iy, ix] += cols[row + ow, base]
    return out
