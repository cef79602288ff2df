"""Pure-numpy conv2d kernels (im2col + tensordot).

Used when the compiled extension is unavailable and for problem sizes where
BLAS beats the direct loops.  All functions take and return plain ndarrays
in NCHW / OIkk layout with zero padding.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _windows(x, k, stride, pad, ho, wo):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def conv2d_forward(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = out_size(h, k, stride, pad), out_size(wd, k, stride, pad)
    win = _windows(x, k, stride, pad, ho, wo)  # N,C,Ho,Wo,k,k
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_grad_input(g, w, x_shape, stride, pad):
    n, c, h, wd = x_shape
    k = w.shape[2]
    ho, wo = g.shape[2], g.shape[3]
    cols = np.tensordot(g, w, axes=([1], [0]))  # N,Ho,Wo,C,k,k
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(xp[:, :, pad : pad + h, pad : pad + wd])


def conv2d_grad_weight(x, g, w_shape, stride, pad):
    k = w_shape[2]
    ho, wo = g.shape[2], g.shape[3]
    win = _windows(x, k, stride, pad, ho, wo)
    return np.ascontiguousarray(np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
