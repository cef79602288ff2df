"""Differentiable network primitives: convolution, resampling, normalization,
patch gathering and padding."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..errors import OddDimension, ShapeMismatch
from . import kernels
from .tensor import (
    Tensor,
    _make,
    add,
    div,
    mean,
    mul,
    power,
    reshape,
    sub,
    tsum,
)

NORM_EPS = 1e-5


# -- convolution -------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation, NCHW input, OIkk weights, zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d channel mismatch: input {x.shape[1]}, weight {w.shape[1]}")
    k = w.shape[2]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ShapeMismatch(f"input {x.shape} too small for kernel {k} with padding {padding}")
    data = kernels.conv2d_forward(x.data, w.data, None if b is None else b.data, stride, padding)

    def vjp(g, out):
        gx = _conv_grad_input(g, w, x.shape, stride, padding) if x.requires_grad else None
        gw = _conv_grad_weight(x, g, w.shape, stride, padding) if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = tsum(g, (0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    def fast(g):
        gx = kernels.conv2d_grad_input(g, w.data, x.shape, stride, padding) if x.requires_grad else None
        gw = kernels.conv2d_grad_weight(x.data, g, w.shape, stride, padding) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, vjp, fast)


def _conv_grad_input(g: Tensor, w: Tensor, x_shape, stride, padding) -> Tensor:
    data = kernels.conv2d_grad_input(g.data, w.data, x_shape, stride, padding)

    def vjp(gx, out):
        dg = conv2d(gx, w, None, stride, padding) if g.requires_grad else None
        dw = _conv_grad_weight(gx, g, w.shape, stride, padding) if w.requires_grad else None
        return dg, dw

    def fast(gx):
        dg = kernels.conv2d_forward(gx, w.data, None, stride, padding) if g.requires_grad else None
        dw = kernels.conv2d_grad_weight(gx, g.data, w.shape, stride, padding) if w.requires_grad else None
        return dg, dw

    return _make(data, (g, w), vjp, fast)


def _conv_grad_weight(x: Tensor, g: Tensor, w_shape, stride, padding) -> Tensor:
    data = kernels.conv2d_grad_weight(x.data, g.data, w_shape, stride, padding)

    def vjp(gw, out):
        dx = _conv_grad_input(g, gw, x.shape, stride, padding) if x.requires_grad else None
        dg = conv2d(x, gw, None, stride, padding) if g.requires_grad else None
        return dx, dg

    def fast(gw):
        dx = kernels.conv2d_grad_input(g.data, gw, x.shape, stride, padding) if x.requires_grad else None
        dg = kernels.conv2d_forward(x.data, gw, None, stride, padding) if g.requires_grad else None
        return dx, dg

    return _make(data, (x, g), vjp, fast)


# -- padding -----------------------------------------------------------------

def pad_circular(x: Tensor, p: int) -> Tensor:
    if p == 0:
        return x
    def vjp(g, out):
        return (fold_circular(g, p),)

    def fast(g):
        return (_fold_data(g, p),)

    return _make(_wrap_data(x.data, p), (x,), vjp, fast)


def _wrap_data(d: np.ndarray, p: int) -> np.ndarray:
    return np.pad(d, ((0, 0), (0, 0), (p, p), (p, p)), mode="wrap")


def _fold_data(d: np.ndarray, p: int) -> np.ndarray:
    h, w = d.shape[2] - 2 * p, d.shape[3] - 2 * p
    rows = d[:, :, p : p + h, :].copy()
    rows[:, :, h - p :, :] += d[:, :, :p, :]
    rows[:, :, :p, :] += d[:, :, p + h :, :]
    out = rows[:, :, :, p : p + w].copy()
    out[:, :, :, w - p :] += rows[:, :, :, :p]
    out[:, :, :, :p] += rows[:, :, :, p + w :]
    return out


def fold_circular(g: Tensor, p: int) -> Tensor:
    """Adjoint of :func:`pad_circular`: wrap the border back and sum."""

    def vjp(gg, o):
        return (pad_circular(gg, p),)

    def fast(gg):
        return (_wrap_data(gg, p),)

    return _make(_fold_data(g.data, p), (g,), vjp, fast)


# -- resampling --------------------------------------------------------------

@lru_cache(maxsize=512)
def _resize_matrix(n_in: int, n_out: int, mode: str, dtype: str) -> np.ndarray:
    scale = n_in / n_out
    a = np.zeros((n_out, n_in), dtype=np.float64)
    idx = np.arange(n_out)
    if mode == "nearest":
        src = np.minimum(np.floor(idx * scale).astype(int), n_in - 1)
        a[idx, src] = 1.0
    elif mode == "bilinear":
        # align_corners=False convention
        src = np.maximum((idx + 0.5) * scale - 0.5, 0.0)
        i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        lam = src - i0
        np.add.at(a, (idx, i0), 1.0 - lam)
        np.add.at(a, (idx, i1), lam)
    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    a = a.astype(dtype)
    a.setflags(write=False)
    return a


def resize_matrix(n_in: int, n_out: int, mode: str, dtype=np.float64) -> np.ndarray:
    return _resize_matrix(n_in, n_out, mode, np.dtype(dtype).name)


def linear_map2d(x: Tensor, ah: np.ndarray, aw: np.ndarray) -> Tensor:
    """``ah @ x[n, c] @ aw.T`` for every (n, c); adjoint uses the transposes."""
    data = np.matmul(np.matmul(ah, x.data), aw.T)

    def vjp(g, out):
        return (linear_map2d(g, ah.T, aw.T),)

    def fast(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return _make(data, (x,), vjp, fast)


def resize(x: Tensor, size: tuple[int, int], mode: str) -> Tensor:
    h, w = x.shape[2], x.shape[3]
    if (h, w) == tuple(size):
        return x
    ah = resize_matrix(h, size[0], mode, x.dtype)
    aw = resize_matrix(w, size[1], mode, x.dtype)
    return linear_map2d(x, ah, aw)


def resample(x: Tensor, scale: float, mode: str) -> Tensor:
    """Nearest or bilinear resampling by a factor of 0.5 or 2."""
    h, w = x.shape[2], x.shape[3]
    if scale == 2:
        return resize(x, (2 * h, 2 * w), mode)
    if scale == 0.5:
        if h % 2 or w % 2:
            raise OddDimension(f"cannot halve odd spatial size {(h, w)}")
        return resize(x, (h // 2, w // 2), mode)
    raise ValueError(f"scale must be 0.5 or 2, got {scale}")


def resample_array(x: np.ndarray, size: tuple[int, int], mode: str) -> np.ndarray:
    """Non-differentiable resize of a (..., H, W) array."""
    ah = resize_matrix(x.shape[-2], size[0], mode, x.dtype)
    aw = resize_matrix(x.shape[-1], size[1], mode, x.dtype)
    return np.matmul(np.matmul(ah, x), aw.T)


# -- normalization -----------------------------------------------------------

def _standardize(x: Tensor, axes, eps: float) -> Tensor:
    """(x - mean) / sqrt(var + eps) over ``axes`` as a single tape node."""
    d = x.data
    xc = d - d.mean(axis=axes, keepdims=True)
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    data = xc * rstd

    def vjp(g, out):
        # rstd is rebuilt on the tape so second derivatives see its dependence on x
        xc_t = sub(x, mean(x, axes, keepdims=True))
        r = power(add(mean(mul(xc_t, xc_t), axes, keepdims=True), eps), -0.5)
        inner = sub(sub(g, mean(g, axes, keepdims=True)), mul(out, mean(mul(g, out), axes, keepdims=True)))
        return (mul(r, inner),)

    def fast(g):
        inner = g - g.mean(axis=axes, keepdims=True) - data * (g * data).mean(axis=axes, keepdims=True)
        return (rstd * inner,)

    return _make(data, (x,), vjp, fast)


def instance_norm(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-(sample, channel) standardization without affine parameters."""
    return _standardize(x, (2, 3), eps)


def batch_norm(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-channel standardization over (N, H, W) using batch statistics.

    With a batch of one this equals instance normalization.
    """
    return _standardize(x, (0, 2, 3), eps)


def normalize(x: Tensor, kind: str) -> Tensor:
    if kind == "instance":
        return instance_norm(x)
    if kind == "batch":
        return batch_norm(x)
    raise ValueError(f"unknown normalization {kind!r}")


def modulate(n: Tensor, gamma: Tensor, beta: Tensor, att: Tensor | None = None) -> Tensor:
    """``n * gamma + beta``, optionally gated as ``att * (n * gamma + beta)``.

    One tape node; all operands share one shape.
    """
    ops = (n, gamma, beta) if att is None else (n, gamma, beta, att)
    if any(t.shape != n.shape for t in ops):
        raise ShapeMismatch(f"modulate operands differ in shape: {[t.shape for t in ops]}")
    inner = n.data * gamma.data + beta.data
    data = inner if att is None else att.data * inner

    def vjp(g, out):
        ga = g if att is None else mul(g, att)
        grads = (mul(ga, gamma), mul(ga, n), ga)
        if att is None:
            return grads
        return grads + (mul(g, add(mul(n, gamma), beta)),)

    def fast(g):
        ga = g if att is None else g * att.data
        grads = (ga * gamma.data, ga * n.data, ga)
        return grads if att is None else grads + (g * inner,)

    return _make(data, ops, vjp, fast)


# -- patches -----------------------------------------------------------------

def extract_patches(x: Tensor, origins, size: int) -> Tensor:
    """Gather square windows.  ``origins`` rows are (n, y, x); result (P, C, s, s)."""
    o = np.asarray(origins, dtype=np.intp).reshape(-1, 3)
    data = _gather_data(x.data, o, size)

    def vjp(g, out):
        return (scatter_patches(g, o, x.shape),)

    def fast(g):
        return (_scatter_data(g, o, x.shape),)

    return _make(data, (x,), vjp, fast)


def scatter_patches(g: Tensor, origins, shape) -> Tensor:
    """Adjoint of :func:`extract_patches` (overlapping windows accumulate)."""
    o = np.asarray(origins, dtype=np.intp).reshape(-1, 3)
    s = g.shape[2]

    def vjp(gg, out):
        return (extract_patches(gg, o, s),)

    def fast(gg):
        return (_gather_data(gg, o, s),)

    return _make(_scatter_data(g.data, o, shape), (g,), vjp, fast)


def _gather_data(d: np.ndarray, o: np.ndarray, size: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(d, (size, size), axis=(2, 3))
    return np.ascontiguousarray(view[o[:, 0], :, o[:, 1], o[:, 2]])


def _scatter_data(g: np.ndarray, o: np.ndarray, shape) -> np.ndarray:
    s = g.shape[2]
    data = np.zeros(shape, dtype=g.dtype)
    for k, (n, y, xx) in enumerate(o):
        data[n, :, y : y + s, xx : xx + s] += g[k]
    return data


def spectral_scale(w: Tensor, u: np.ndarray, v: np.ndarray) -> Tensor:
    """``w / (u^T W v)`` with W the (out, rest) matricization; u, v held fixed.

    An all-zero estimate (uninitialized weights) leaves ``w`` unscaled.
    """
    sigma = float(u @ w.data.reshape(len(u), -1) @ v)
    if sigma == 0.0:
        return w
    uv = np.outer(u, v).reshape(w.shape).astype(w.dtype, copy=False)

    def vjp(g, out):
        uvt = Tensor(uv)
        s = tsum(mul(w, uvt))
        return (sub(div(g, s), mul(div(tsum(mul(g, w)), mul(s, s)), uvt)),)

    def fast(g):
        return (g / sigma - (float(np.vdot(g, w.data)) / (sigma * sigma)) * uv,)

    return _make(w.data / sigma, (w,), vjp, fast)


def channel_sum(x: Tensor) -> Tensor:
    return tsum(x, 1, keepdims=True)


def reshape_bias(b: Tensor) -> Tensor:
    return reshape(b, (1, -1, 1, 1))
