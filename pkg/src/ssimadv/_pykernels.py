"""Pure-numpy convolution kernels; same contracts as the compiled ``_ckernels``."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _patches(x, kh, kw, stride):
    # (N, Ho, Wo, kh, kw, C) view without copying
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return win.transpose(0, 1, 2, 4, 5, 3)


def conv2d_forward(x, w, b, stride):
    kh, kw, c, o = w.shape
    cols = _patches(x, kh, kw, stride)
    n, ho, wo = cols.shape[:3]
    y = cols.reshape(n * ho * wo, kh * kw * c) @ w.reshape(kh * kw * c, o)
    y += b
    return y.reshape(n, ho, wo, o)


def conv2d_backward_input(dy, w, x_shape, stride):
    kh, kw, c, o = w.shape
    n, ho, wo, _ = dy.shape
    dcols = (dy.reshape(-1, o) @ w.reshape(-1, o).T).reshape(n, ho, wo, kh, kw, c)
    dx = np.zeros(x_shape, dtype=np.float64)
    for di in range(kh):
        for dj in range(kw):
            dx[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride] += (
                dcols[:, :, :, di, dj]
            )
    return dx


def conv2d_backward_weight(dy, x, w_shape, stride):
    kh, kw, c, o = w_shape
    cols = _patches(x, kh, kw, stride).reshape(-1, kh * kw * c)
    dy2 = dy.reshape(-1, o)
    dw = (cols.T @ dy2).reshape(w_shape)
    return dw, dy2.sum(axis=0)
