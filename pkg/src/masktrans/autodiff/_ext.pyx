# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: conv2d via im2col / col2im around a BLAS gemm, and a
fused Adam update.

The conv functions share the contract of ``_conv_numpy``.  The win over the
numpy path comes from doing the unfold and the scatter-add in one pass
without Python-level temporaries, which dominates for the small feature maps
of desk-scale runs.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, sqrtf
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()


cdef inline void _gemm_rm(bint ta, bint tb, int M, int N, int K, floating alpha,
                          floating* A, int lda, floating* B, int ldb,
                          floating beta, floating* C, int ldc) noexcept nogil:
    # row-major C = alpha * op(A) @ op(B) + beta * C, via column-major C^T = op(B)^T op(A)^T
    cdef char ca = b'T' if ta else b'N'
    cdef char cb = b'T' if tb else b'N'
    if floating is float:
        sgemm(&cb, &ca, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)
    else:
        dgemm(&cb, &ca, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


cdef inline void _valid_cols(int j, int s, int p, int W, int Wo, int* lo, int* hi) noexcept nogil:
    # output columns xx with 0 <= xx*s + j - p < W
    cdef int a = p - j
    lo[0] = 0 if a <= 0 else (a + s - 1) // s
    hi[0] = (W - 1 + p - j) // s + 1 if W - 1 + p - j >= 0 else 0
    if hi[0] > Wo:
        hi[0] = Wo
    if lo[0] > hi[0]:
        lo[0] = hi[0]


cdef void _im2col(floating* x, int C, int H, int W, int K, int s, int p,
                  int Ho, int Wo, floating* col) noexcept nogil:
    # col[(c*K + i)*K + j, y*Wo + xx] = x[c, y*s + i - p, xx*s + j - p] (zero outside)
    cdef int c, i, j, y, xx, iy, row, lo, hi
    cdef floating* dst
    cdef floating* src
    for c in range(C):
        for i in range(K):
            for j in range(K):
                row = (c * K + i) * K + j
                _valid_cols(j, s, p, W, Wo, &lo, &hi)
                for y in range(Ho):
                    dst = col + <Py_ssize_t>row * Ho * Wo + y * Wo
                    iy = y * s + i - p
                    if iy < 0 or iy >= H or lo == hi:
                        memset(dst, 0, Wo * sizeof(floating))
                        continue
                    if lo > 0:
                        memset(dst, 0, lo * sizeof(floating))
                    if hi < Wo:
                        memset(dst + hi, 0, (Wo - hi) * sizeof(floating))
                    src = x + (<Py_ssize_t>c * H + iy) * W + j - p
                    if s == 1:
                        memcpy(dst + lo, src + lo, (hi - lo) * sizeof(floating))
                    else:
                        for xx in range(lo, hi):
                            dst[xx] = src[xx * s]


cdef void _col2im(floating* col, int C, int H, int W, int K, int s, int p,
                  int Ho, int Wo, floating* x) noexcept nogil:
    cdef int c, i, j, y, xx, iy, row, lo, hi
    cdef floating* src
    cdef floating* dst
    for c in range(C):
        for i in range(K):
            for j in range(K):
                row = (c * K + i) * K + j
                _valid_cols(j, s, p, W, Wo, &lo, &hi)
                if lo == hi:
                    continue
                for y in range(Ho):
                    iy = y * s + i - p
                    if iy < 0 or iy >= H:
                        continue
                    src = col + <Py_ssize_t>row * Ho * Wo + y * Wo
                    dst = x + (<Py_ssize_t>c * H + iy) * W + j - p
                    if s == 1:
                        for xx in range(lo, hi):
                            dst[xx] += src[xx]
                    else:
                        for xx in range(lo, hi):
                            dst[xx * s] += src[xx]


def _forward(floating[:, :, :, ::1] x, floating[:, ::1] w2, floating[:, :, :, ::1] out,
             floating[:, ::1] col, int K, int stride, int pad, bint direct):
    cdef int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int O = w2.shape[0], CKK = w2.shape[1], Ho = out.shape[2], Wo = out.shape[3]
    cdef int n, L = Ho * Wo
    cdef floating* colp
    with nogil:
        for n in range(N):
            if direct:  # 1x1, stride 1, no padding: the input already is the column matrix
                colp = &x[n, 0, 0, 0]
            else:
                colp = &col[0, 0]
                _im2col(&x[n, 0, 0, 0], C, H, W, K, stride, pad, Ho, Wo, colp)
            _gemm_rm(False, False, O, L, CKK, 1, &w2[0, 0], CKK, colp, L, 1, &out[n, 0, 0, 0], L)


def _grad_input(floating[:, :, :, ::1] g, floating[:, ::1] w2, floating[:, :, :, ::1] gx,
                floating[:, ::1] col, int K, int stride, int pad, bint direct):
    cdef int N = gx.shape[0], C = gx.shape[1], H = gx.shape[2], W = gx.shape[3]
    cdef int O = w2.shape[0], CKK = w2.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    cdef int n, L = Ho * Wo
    with nogil:
        for n in range(N):
            if direct:
                _gemm_rm(True, False, CKK, L, O, 1, &w2[0, 0], CKK, &g[n, 0, 0, 0], L, 0, &gx[n, 0, 0, 0], L)
            else:
                _gemm_rm(True, False, CKK, L, O, 1, &w2[0, 0], CKK, &g[n, 0, 0, 0], L, 0, &col[0, 0], L)
                _col2im(&col[0, 0], C, H, W, K, stride, pad, Ho, Wo, &gx[n, 0, 0, 0])


def _grad_weight(floating[:, :, :, ::1] x, floating[:, :, :, ::1] g, floating[:, ::1] gw2,
                 floating[:, ::1] col, int K, int stride, int pad, bint direct):
    cdef int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int O = gw2.shape[0], CKK = gw2.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    cdef int n, L = Ho * Wo
    cdef floating* colp
    with nogil:
        for n in range(N):
            if direct:
                colp = &x[n, 0, 0, 0]
            else:
                colp = &col[0, 0]
                _im2col(&x[n, 0, 0, 0], C, H, W, K, stride, pad, Ho, Wo, colp)
            _gemm_rm(False, True, O, CKK, L, 1, &g[n, 0, 0, 0], L, colp, L, 1, &gw2[0, 0], CKK)


cdef inline int _osz(int n, int k, int s, int p):
    return (n + 2 * p - k) // s + 1


def conv2d_forward(x, w, b, int stride, int pad):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = _osz(h, k, stride, pad), _osz(wd, k, stride, pad)
    direct = k == 1 and stride == 1 and pad == 0
    if b is None:
        out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    else:
        out = np.empty((n, o, ho, wo), dtype=x.dtype)
        out[...] = np.asarray(b, dtype=x.dtype).reshape(1, o, 1, 1)
    col = np.empty((1, 1) if direct else (c * k * k, ho * wo), dtype=x.dtype)
    _forward(x, w.reshape(o, -1), out, col, k, stride, pad, direct)
    return out


def conv2d_grad_input(g, w, x_shape, int stride, int pad):
    g = np.ascontiguousarray(g)
    w = np.ascontiguousarray(w, dtype=g.dtype)
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    direct = k == 1 and stride == 1 and pad == 0
    gx = np.zeros((n, c, h, wd), dtype=g.dtype)
    col = np.empty((1, 1) if direct else (c * k * k, g.shape[2] * g.shape[3]), dtype=g.dtype)
    _grad_input(g, w.reshape(o, -1), gx, col, k, stride, pad, direct)
    return gx


def conv2d_grad_weight(x, g, w_shape, int stride, int pad):
    g = np.ascontiguousarray(g)
    x = np.ascontiguousarray(x, dtype=g.dtype)
    o, c, k, _ = w_shape
    direct = k == 1 and stride == 1 and pad == 0
    gw = np.zeros((o, c * k * k), dtype=g.dtype)
    col = np.empty((1, 1) if direct else (c * k * k, g.shape[2] * g.shape[3]), dtype=g.dtype)
    _grad_weight(x, g, gw, col, k, stride, pad, direct)
    return gw.reshape(o, c, k, k)


def adam_update(floating[::1] p, floating[::1] g, floating[::1] m, floating[::1] v,
                double lr, double b1, double b2, double c1, double c2, double eps):
    """In-place Adam step on flat arrays; ``c1``/``c2`` are the bias corrections.

    Arithmetic runs in the parameter dtype so the loop vectorizes.
    """
    cdef Py_ssize_t i, n = p.shape[0]
    cdef floating step = <floating>(lr / c1)
    cdef floating inv_c2 = <floating>(1.0 / c2)
    cdef floating fb1 = <floating>b1, fb2 = <floating>b2, fe = <floating>eps
    cdef floating a1 = <floating>(1.0 - b1), a2 = <floating>(1.0 - b2)
    cdef floating gi, mi, vi
    with nogil:
        for i in range(n):
            gi = g[i]
            mi = fb1 * m[i] + a1 * gi
            vi = fb2 * v[i] + a2 * gi * gi
            m[i] = mi
            v[i] = vi
            if floating is float:
                p[i] = p[i] - step * mi / (sqrtf(vi * inv_c2) + fe)
            else:
                p[i] = p[i] - step * mi / (sqrt(vi * inv_c2) + fe)
