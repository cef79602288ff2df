"""Hot-kernel dispatch between the compiled extension and numpy.

The compiled im2col/BLAS conv kernels and the fused Adam update are used
whenever the extension is built; the numpy versions are the portable
fallback.  Set ``MASKTRANS_PURE_PYTHON=1`` to disable the extension at
import time.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

from . import _conv_numpy

try:
    if os.environ.get("MASKTRANS_PURE_PYTHON"):
        raise ImportError("disabled by MASKTRANS_PURE_PYTHON")
    from . import _ext
except ImportError:  # extension not built
    _ext = None

HAVE_EXTENSION = _ext is not None

_mode = "compiled" if HAVE_EXTENSION else "numpy"


def backend() -> str:
    return _mode


def set_backend(mode: str) -> None:
    """Select ``"compiled"`` or ``"numpy"``."""
    global _mode
    if mode not in ("compiled", "numpy"):
        raise ValueError(f"unknown backend {mode!r}")
    if mode == "compiled" and not HAVE_EXTENSION:
        raise RuntimeError("compiled extension is not available")
    _mode = mode


@contextlib.contextmanager
def using_backend(mode: str):
    prev = _mode
    set_backend(mode)
    try:
        yield
    finally:
        set_backend(prev)


def _impl():
    return _ext if _mode == "compiled" else _conv_numpy


def conv2d_forward(x, w, b, stride, pad):
    return _impl().conv2d_forward(x, w, b, stride, pad)


def conv2d_grad_input(g, w, x_shape, stride, pad):
    return _impl().conv2d_grad_input(g, w, x_shape, stride, pad)


def conv2d_grad_weight(x, g, w_shape, stride, pad):
    return _impl().conv2d_grad_weight(x, g, w_shape, stride, pad)


def adam_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                lr: float, b1: float, b2: float, c1: float, c2: float, eps: float) -> None:
    """In-place Adam step on one parameter array (all arrays same shape and dtype)."""
    if _mode == "compiled" and p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous:
        g = np.ascontiguousarray(g, dtype=p.dtype)
        _ext.adam_update(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1), lr, b1, b2, c1, c2, eps)
        return
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    p -= ((lr / c1) * m / (np.sqrt(v * (1.0 / c2)) + eps)).astype(p.dtype, copy=False)
