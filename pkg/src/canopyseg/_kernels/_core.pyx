# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loops for the convolution, pooling and confusion hot paths.

Every function mirrors one in ``_fallback`` and must stay bit-identical to it:
accumulations run in the same (row, ky, kx) order as the numpy version.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.string cimport memcpy, memset

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int k):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int p = k // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((c * k * k, n * h * w), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t ci, ky, kx, ni, y, sy, x0, x1
    cdef size_t item = sizeof(floating)
    cdef floating* dst
    with nogil:
        for ci in range(c):
            for ky in range(k):
                for kx in range(k):
                    dst = &cols[(ci * k + ky) * k + kx, 0]
                    # output columns [x0, x1) read inside the row; the rest is padding
                    x0 = max(0, p - kx)
                    x1 = min(w, w + p - kx)
                    for ni in range(n):
                        for y in range(h):
                            sy = y + ky - p
                            if sy < 0 or sy >= h or x1 <= x0:
                                memset(dst, 0, w * item)
                            else:
                                memset(dst, 0, x0 * item)
                                memcpy(dst + x0, &x[ni, ci, sy, x0 + kx - p], (x1 - x0) * item)
                                memset(dst + x1, 0, (w - x1) * item)
                            dst += w
    return out


def col2im(floating[:, ::1] cols, tuple shape, int k):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef int p = k // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t ci, ky, kx, ni, y, xx, row, col, sy, sx
    with nogil:
        for ci in range(c):
            for ky in range(k):
                for kx in range(k):
                    row = (ci * k + ky) * k + kx
                    col = 0
                    for ni in range(n):
                        for y in range(h):
                            sy = y + ky - p
                            if sy < 0 or sy >= h:
                                col += w
                                continue
                            for xx in range(w):
                                sx = xx + kx - p
                                if sx >= 0 and sx < w:
                                    dx[ni, ci, sy, sx] += cols[row, col]
                                col += 1
    return out


def maxpool2x2(floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2] // 2, w = x.shape[3] // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c, h, w), dtype=dtype)
    idx = np.empty((n, c, h, w), dtype=np.int8)
    cdef floating[:, :, :, ::1] o = out
    cdef cnp.int8_t[:, :, :, ::1] a = idx
    cdef Py_ssize_t ni, ci, i, j
    cdef floating best, v
    cdef cnp.int8_t arg
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for i in range(h):
                    for j in range(w):
                        best = x[ni, ci, 2 * i, 2 * j]
                        arg = 0
                        v = x[ni, ci, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            arg = 1
                        v = x[ni, ci, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            arg = 2
                        v = x[ni, ci, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            arg = 3
                        o[ni, ci, i, j] = best
                        a[ni, ci, i, j] = arg
    return out, idx


def maxpool2x2_backward(floating[:, :, :, ::1] grad, cnp.int8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], h = grad.shape[2], w = grad.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t ni, ci, i, j
    cdef int arg
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for i in range(h):
                    for j in range(w):
                        arg = idx[ni, ci, i, j]
                        dx[ni, ci, 2 * i + arg // 2, 2 * j + arg % 2] = grad[ni, ci, i, j]
    return out


def confusion_counts(floating[::1] pred, cnp.uint8_t[::1] target, double threshold):
    if pred.shape[0] != target.shape[0]:
        raise ValueError("pred and target lengths differ")
    cdef Py_ssize_t i
    cdef long long tp = 0, fp = 0, tn = 0, fn = 0
    with nogil:
        for i in range(pred.shape[0]):
            if <double>pred[i] >= threshold:
                if target[i]:
                    tp += 1
                else:
                    fp += 1
            else:
                if target[i]:
                    fn += 1
                else:
                    tn += 1
    return int(tp), int(fp), int(tn), int(fn)


# -- direct 3x3 convolution ---------------------------------------------------
# Works one output row at a time for four filters at once: the three taps of
# a kernel row are unrolled, so each loaded input value feeds 12 FMAs and the
# four accumulator rows stay in L1. This beats im2col + GEMM when H*W is
# large and channel counts are small; wide layers still go through GEMM.

cdef extern from "_rowtaps.h" nogil:
    void row_taps_f(float *a0, float *a1, float *a2, float *a3, const float *inp,
                    const float *w0, const float *w1, const float *w2, const float *w3, Py_ssize_t n)
    void row_taps_d(double *a0, double *a1, double *a2, double *a3, const double *inp,
                    const double *w0, const double *w1, const double *w2, const double *w3, Py_ssize_t n)
    void row_dots_f(const float *g, const float *inp, Py_ssize_t n, float *out)
    void row_dots_d(const double *g, const double *inp, Py_ssize_t n, double *out)


cdef inline void _row_taps(floating *a0, floating *a1, floating *a2, floating *a3,
                           const floating *ip, const floating *w0, const floating *w1,
                           const floating *w2, const floating *w3, Py_ssize_t width) noexcept nogil:
    if floating is float:
        row_taps_f(a0, a1, a2, a3, ip, w0, w1, w2, w3, width)
    else:
        row_taps_d(a0, a1, a2, a3, ip, w0, w1, w2, w3, width)


def conv3x3_direct(floating[:, :, :, ::1] x, floating[:, :, :, ::1] w, floating[::1] b):
    """Zero-padded stride-1 3x3 cross-correlation, N x C x H x W -> N x F x H x W."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, f, h, wd), dtype=dtype)
    # padding filters (f not a multiple of 4) write into scratch with zero weights
    scratch = np.zeros((4, wd), dtype=dtype)
    zeros = np.zeros(9, dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef floating[:, ::1] sc = scratch
    cdef floating[::1] zw = zeros
    cdef Py_ssize_t ni, f0, j, ci, ky, y, xx, sy
    cdef floating *acc[4]
    cdef const floating *wp[4]
    with nogil:
        for ni in range(n):
            for f0 in range(0, f, 4):
                for y in range(h):
                    for j in range(4):
                        if f0 + j < f:
                            acc[j] = &o[ni, f0 + j, y, 0]
                            for xx in range(wd):
                                acc[j][xx] = b[f0 + j]
                        else:
                            acc[j] = &sc[j, 0]
                    for ci in range(c):
                        for ky in range(3):
                            sy = y + ky - 1
                            if sy < 0 or sy >= h:
                                continue
                            for j in range(4):
                                if f0 + j < f:
                                    wp[j] = &w[f0 + j, ci, ky, 0]
                                else:
                                    wp[j] = &zw[0]
                            _row_taps(acc[0], acc[1], acc[2], acc[3], &x[ni, ci, sy, 0],
                                      wp[0], wp[1], wp[2], wp[3], wd)
    return out


def conv3x3_direct_grad_weight(floating[:, :, :, ::1] x, floating[:, :, :, ::1] g):
    """dW[f, c, ky, kx] = sum over n, y, x of g[n, f, y, x] * xpad[n, c, y + ky, x + kx]."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = g.shape[1]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((f, c, 3, 3), dtype=dtype)
    cdef floating[:, :, :, ::1] dw = out
    cdef Py_ssize_t ni, fi, ci, ky, y, xx, sy
    cdef const floating *gp
    cdef const floating *ip
    with nogil:
        for ni in range(n):
            for fi in range(f):
                for ci in range(c):
                    for ky in range(3):
                        for y in range(h):
                            sy = y + ky - 1
                            if sy < 0 or sy >= h:
                                continue
                            gp = &g[ni, fi, y, 0]
                            ip = &x[ni, ci, sy, 0]
                            if floating is float:
                                row_dots_f(gp, ip, wd, &dw[fi, ci, ky, 0])
                            else:
                                row_dots_d(gp, ip, wd, &dw[fi, ci, ky, 0])
    return out
