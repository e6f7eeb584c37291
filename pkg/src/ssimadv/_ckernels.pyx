# cython: language_level=3
"""Compiled convolution kernels (NHWC, float64).

Patches are gathered into a contiguous column buffer one image at a time and
multiplied through BLAS ``dgemm`` from scipy.  All arrays are row-major; the
``dgemm`` calls below are written against the column-major view of the same
memory, which is why the operand order looks transposed.
"""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef char NN = b'N'
cdef char TT = b'T'


cdef void _im2col(const double[:, :, ::1] x, double[:, ::1] cols,
                  int kh, int kw, int stride, int ho, int wo) noexcept nogil:
    cdef int c = x.shape[2]
    cdef int i, j, di, dj, ch, row, col
    for i in range(ho):
        for j in range(wo):
            row = i * wo + j
            col = 0
            for di in range(kh):
                for dj in range(kw):
                    for ch in range(c):
                        cols[row, col] = x[i * stride + di, j * stride + dj, ch]
                        col += 1


cdef void _col2im(const double[:, ::1] cols, double[:, :, ::1] dx,
                  int kh, int kw, int stride, int ho, int wo) noexcept nogil:
    cdef int c = dx.shape[2]
    cdef int i, j, di, dj, ch, row, col
    for i in range(ho):
        for j in range(wo):
            row = i * wo + j
            col = 0
            for di in range(kh):
                for dj in range(kw):
                    for ch in range(c):
                        dx[i * stride + di, j * stride + dj, ch] += cols[row, col]
                        col += 1


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   const double[::1] b, int stride):
    cdef int n = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3]
    cdef int kh = w.shape[0], kw = w.shape[1], o = w.shape[3]
    cdef int ho = (h - kh) // stride + 1, wo = (wd - kw) // stride + 1
    cdef int m = ho * wo, k = kh * kw * c
    out = np.empty((n, ho, wo, o), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef double[:, ::1] cols = np.empty((m, k), dtype=np.float64)
    cdef double one = 1.0, zero = 0.0
    cdef int s, r, q, t
    with nogil:
        for s in range(n):
            _im2col(x[s], cols, kh, kw, stride, ho, wo)
            dgemm(&NN, &NN, &o, &m, &k, &one, <double*>&w[0, 0, 0, 0], &o,
                  &cols[0, 0], &k, &zero, &y[s, 0, 0, 0], &o)
            for r in range(ho):
                for q in range(wo):
                    for t in range(o):
                        y[s, r, q, t] += b[t]
    return out


def conv2d_backward_input(const double[:, :, :, ::1] dy, const double[:, :, :, ::1] w,
                          tuple x_shape, int stride):
    cdef int n = x_shape[0], h = x_shape[1], wd = x_shape[2], c = x_shape[3]
    cdef int kh = w.shape[0], kw = w.shape[1], o = w.shape[3]
    cdef int ho = dy.shape[1], wo = dy.shape[2]
    cdef int m = ho * wo, k = kh * kw * c
    out = np.zeros((n, h, wd, c), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef double[:, ::1] cols = np.empty((m, k), dtype=np.float64)
    cdef double one = 1.0, zero = 0.0
    cdef int s
    with nogil:
        for s in range(n):
            dgemm(&TT, &NN, &k, &m, &o, &one, <double*>&w[0, 0, 0, 0], &o,
                  <double*>&dy[s, 0, 0, 0], &o, &zero, &cols[0, 0], &k)
            _col2im(cols, dx[s], kh, kw, stride, ho, wo)
    return out


def conv2d_backward_weight(const double[:, :, :, ::1] dy, const double[:, :, :, ::1] x,
                           tuple w_shape, int stride):
    cdef int n = x.shape[0]
    cdef int kh = w_shape[0], kw = w_shape[1], c = w_shape[2], o = w_shape[3]
    cdef int ho = dy.shape[1], wo = dy.shape[2]
    cdef int m = ho * wo, k = kh * kw * c
    dw_arr = np.zeros(w_shape, dtype=np.float64)
    db_arr = np.zeros(o, dtype=np.float64)
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[:, ::1] cols = np.empty((m, k), dtype=np.float64)
    cdef double one = 1.0
    cdef int s, r, q, t
    with nogil:
        for s in range(n):
            _im2col(x[s], cols, kh, kw, stride, ho, wo)
            dgemm(&NN, &TT, &o, &k, &m, &one, <double*>&dy[s, 0, 0, 0], &o,
                  &cols[0, 0], &k, &one, &dw[0, 0, 0, 0], &o)
            for r in range(ho):
                for q in range(wo):
                    for t in range(o):
                        db[t] += dy[s, r, q, t]
    return dw_arr, db_arr
