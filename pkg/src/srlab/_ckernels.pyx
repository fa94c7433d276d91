# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

im2col/col2im loops in C feeding BLAS gemm; direct loops for pooling.
Signatures match ``srlab._pykernels`` one to one.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport sgemm, dgemm

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _imax(Py_ssize_t a, Py_ssize_t b) nogil:
    return a if a > b else b


cdef inline Py_ssize_t _imin(Py_ssize_t a, Py_ssize_t b) nogil:
    return a if a < b else b


cdef void _gemm(char *ta, char *tb, int m, int n, int k, real *a, int lda,
                real *b, int ldb, real beta, real *c, int ldc) noexcept nogil:
    cdef float fone = 1.0, fbeta = <float>beta
    cdef double done = 1.0, dbeta = <double>beta
    if real is float:
        sgemm(ta, tb, &m, &n, &k, &fone, a, &lda, b, &ldb, &fbeta, c, &ldc)
    else:
        dgemm(ta, tb, &m, &n, &k, &done, a, &lda, b, &ldb, &dbeta, c, &ldc)


cdef void _im2col(real[:, :, ::1] x, int KH, int KW, int pad,
                  real[:, ::1] cols) noexcept nogil:
    # cols[(c, ki, kj), (oi, oj)] = x[c, oi + ki - pad, oj + kj - pad], zero outside
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t Ho = H + 2 * pad - KH + 1, Wo = W + 2 * pad - KW + 1
    cdef Py_ssize_t c, ki, kj, oi, oj, ii, off, j0, j1, row
    for c in range(C):
        for ki in range(KH):
            for kj in range(KW):
                row = (c * KH + ki) * KW + kj
                off = kj - pad
                j0 = _imax(0, -off)
                j1 = _imin(Wo, W - off)
                for oi in range(Ho):
                    ii = oi + ki - pad
                    if ii < 0 or ii >= H:
                        for oj in range(Wo):
                            cols[row, oi * Wo + oj] = 0
                        continue
                    for oj in range(j0):
                        cols[row, oi * Wo + oj] = 0
                    for oj in range(j0, j1):
                        cols[row, oi * Wo + oj] = x[c, ii, oj + off]
                    for oj in range(j1, Wo):
                        cols[row, oi * Wo + oj] = 0


cdef void _col2im(real[:, ::1] cols, int KH, int KW, int pad,
                  real[:, :, ::1] dx) noexcept nogil:
    cdef Py_ssize_t C = dx.shape[0], H = dx.shape[1], W = dx.shape[2]
    cdef Py_ssize_t Ho = H + 2 * pad - KH + 1, Wo = W + 2 * pad - KW + 1
    cdef Py_ssize_t c, ki, kj, oi, oj, ii, off, j0, j1, row
    for c in range(C):
        for ki in range(KH):
            for kj in range(KW):
                row = (c * KH + ki) * KW + kj
                off = kj - pad
                j0 = _imax(0, -off)
                j1 = _imin(Wo, W - off)
                for oi in range(Ho):
                    ii = oi + ki - pad
                    if ii < 0 or ii >= H:
                        continue
                    for oj in range(j0, j1):
                        dx[c, ii, oj + off] += cols[row, oi * Wo + oj]


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] b, int pad):
    cdef int N = x.shape[0], F = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef int Ho = x.shape[2] + 2 * pad - KH + 1
    cdef int Wo = x.shape[3] + 2 * pad - KW + 1
    cdef int P = Ho * Wo, Q = x.shape[1] * KH * KW
    dtype = np.float32 if real is float else np.float64
    out = np.empty((N, F, Ho, Wo), dtype=dtype)
    cols_arr = np.empty((Q, P), dtype=dtype)
    cdef real[:, :, :, ::1] ov = out
    cdef real[:, ::1] cols = cols_arr
    cdef int n, f, p
    with nogil:
        for n in range(N):
            _im2col(x[n], KH, KW, pad, cols)
            # out_n (F x P) = w (F x Q) @ cols (Q x P), row-major via swapped operands
            _gemm(b"N", b"N", P, F, Q, &cols[0, 0], P, &w[0, 0, 0, 0], Q,
                  0, &ov[n, 0, 0, 0], P)
            for f in range(F):
                for p in range(P):
                    ov[n, f, p // Wo, p % Wo] += b[f]
    return out


def conv2d_backward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                    real[:, :, :, ::1] gout, int pad, bint need_dx=True, bint need_dw=True):
    """Return ``(dx, dw, db)``; entries not requested are ``None``."""
    cdef int N = x.shape[0], F = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef int Ho = gout.shape[2], Wo = gout.shape[3]
    cdef int P = Ho * Wo, Q = x.shape[1] * KH * KW
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((x.shape[0], x.shape[1], x.shape[2], x.shape[3]), dtype=dtype)
    dw_arr = np.zeros((F, x.shape[1], KH, KW), dtype=dtype)
    cols_arr = np.empty((Q, P), dtype=dtype)
    cdef real[:, :, :, ::1] dxv = dx_arr
    cdef real[:, :, :, ::1] dwv = dw_arr
    cdef real[:, ::1] cols = cols_arr
    cdef int n
    with nogil:
        for n in range(N):
            if need_dw:
                _im2col(x[n], KH, KW, pad, cols)
                # dw (F x Q) += g_n (F x P) @ cols^T
                _gemm(b"T", b"N", Q, F, P, &cols[0, 0], P, &gout[n, 0, 0, 0], P,
                      1, &dwv[0, 0, 0, 0], Q)
            if need_dx:
                # dcols (Q x P) = w^T (Q x F) @ g_n (F x P)
                _gemm(b"N", b"T", P, Q, F, &gout[n, 0, 0, 0], P, &w[0, 0, 0, 0], Q,
                      0, &cols[0, 0], P)
                _col2im(cols, KH, KW, pad, dxv[n])
    db = np.asarray(gout).sum(axis=(0, 2, 3))
    return (dx_arr if need_dx else None), (dw_arr if need_dw else None), db


def maxpool2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t Ho = x.shape[2] // 2, Wo = x.shape[3] // 2
    dtype = np.float32 if real is float else np.float64
    out = np.empty((N, C, Ho, Wo), dtype=dtype)
    idx = np.empty((N, C, Ho, Wo), dtype=np.int8)
    cdef real[:, :, :, ::1] ov = out
    cdef cnp.int8_t[:, :, :, ::1] iv = idx
    cdef Py_ssize_t n, c, i, j, a, bb
    cdef real best, v
    cdef cnp.int8_t arg
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        best = x[n, c, 2 * i, 2 * j]
                        arg = 0
                        for a in range(2):
                            for bb in range(2):
                                v = x[n, c, 2 * i + a, 2 * j + bb]
                                if v > best:
                                    best = v
                                    arg = <cnp.int8_t>(2 * a + bb)
                        ov[n, c, i, j] = best
                        iv[n, c, i, j] = arg
    return out, idx


def maxpool2_backward(real[:, :, :, ::1] gout, cnp.int8_t[:, :, :, ::1] idx, Py_ssize_t H, Py_ssize_t W):
    cdef Py_ssize_t N = gout.shape[0], C = gout.shape[1]
    cdef Py_ssize_t Ho = gout.shape[2], Wo = gout.shape[3]
    dtype = np.float32 if real is float else np.float64
    dx = np.zeros((N, C, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] dv = dx
    cdef Py_ssize_t n, c, i, j
    cdef int k
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        k = idx[n, c, i, j]
                        dv[n, c, 2 * i + k // 2, 2 * j + k % 2] += gout[n, c, i, j]
    return dx
