"""Feature-adaptive (FADE) and feature-attentive (FATE) denormalization.

FADE modulates normalized generator features with per-pixel scale and shift
predicted from content features::

    fade(h, f) = N(h) * gamma(f) + beta(f)

FATE gates both statistics with a sigmoid attention map computed from the
normalized generator features and the content features::

    fate(h, f) = N(h) * A(h, f) * gamma(f) + A(h, f) * beta(f)
"""

from __future__ import annotations

import numpy as np

from .autodiff import functional as F
from .autodiff.nn import Conv2d, Module
from .autodiff.tensor import Tensor, add, concat, leaky_relu, sigmoid
from .errors import ShapeMismatch

LEAK = 0.2


def _check_aligned(h: Tensor, f: Tensor) -> None:
    if h.ndim != 4 or f.ndim != 4:
        raise ShapeMismatch(f"expected 4-D tensors, got {h.shape} and {f.shape}")
    if h.shape[0] != f.shape[0] or h.shape[2:] != f.shape[2:]:
        raise ShapeMismatch(f"content features {f.shape} not aligned with {h.shape}")


class FadeParams(Module):
    """gamma and beta: one 3x3 convolution each, content channels -> feature channels."""

    def __init__(self, c_h: int, c_f: int, rng=None, gain: float = 0.02, init: bool = True):
        self.gamma = Conv2d(c_f, c_h, 3, rng=rng, gain=gain, init=init)
        self.beta = Conv2d(c_f, c_h, 3, rng=rng, gain=gain, init=init)


class AttentionParams(Module):
    """Two 3x3 layers over the concatenation of N(h) and f, sigmoid output."""

    def __init__(self, c_h: int, c_f: int, rng=None, gain: float = 0.02, init: bool = True):
        self.conv1 = Conv2d(c_h + c_f, c_h, 3, rng=rng, gain=gain, init=init)
        self.conv2 = Conv2d(c_h, c_h, 3, rng=rng, gain=gain, init=init)


def attention(h_normed: Tensor, f: Tensor, p: AttentionParams) -> Tensor:
    _check_aligned(h_normed, f)
    a = leaky_relu(p.conv1(concat([h_normed, f], axis=1)), LEAK)
    return sigmoid(p.conv2(a))


def fade(h: Tensor, f: Tensor, p: FadeParams, norm: str = "batch") -> Tensor:
    _check_aligned(h, f)
    return F.modulate(F.normalize(h, norm), p.gamma(f), p.beta(f))


def fate(h: Tensor, f: Tensor, p: FadeParams, a: AttentionParams, norm: str = "batch",
         return_attention: bool = False):
    _check_aligned(h, f)
    n = F.normalize(h, norm)
    att = attention(n, f, a)
    out = F.modulate(n, p.gamma(f), p.beta(f), att)
    return (out, att) if return_attention else out


class Denorm(Module):
    """One FADE or FATE modulation site."""

    def __init__(self, c_h: int, c_f: int, mode: str = "fate", norm: str = "batch", rng=None,
                 gain: float = 0.02, init: bool = True):
        if mode not in ("fade", "fate"):
            raise ValueError(f"unknown denormalization {mode!r}")
        self.mode, self.norm = mode, norm
        self.c_h, self.c_f = c_h, c_f
        self.fade = FadeParams(c_h, c_f, rng, gain, init)
        self.attn = AttentionParams(c_h, c_f, rng, gain, init) if mode == "fate" else None
        self.last_attention: np.ndarray | None = None
        self.record_attention = False

    def __call__(self, h: Tensor, f: Tensor) -> Tensor:
        if self.mode == "fade":
            return fade(h, f, self.fade, self.norm)
        out, att = fate(h, f, self.fade, self.attn, self.norm, return_attention=True)
        if self.record_attention:
            self.last_attention = att.data.copy()
        return out


class FateResBlock(Module):
    """Residual block: main path (mod -> lrelu -> 3x3 conv) twice, skip path
    mod -> 1x1 conv; the output is their sum."""

    def __init__(self, c_in: int, c_out: int, c_f: int, mode: str = "fate", norm: str = "batch",
                 spectral: bool = True, rng=None, gain: float = 0.02, init: bool = True):
        mid = min(c_in, c_out)
        self.c_in, self.c_out, self.c_f = c_in, c_out, c_f
        self.mod0 = Denorm(c_in, c_f, mode, norm, rng, gain, init)
        self.conv0 = Conv2d(c_in, mid, 3, spectral=spectral, rng=rng, gain=gain, init=init)
        self.mod1 = Denorm(mid, c_f, mode, norm, rng, gain, init)
        self.conv1 = Conv2d(mid, c_out, 3, spectral=spectral, rng=rng, gain=gain, init=init)
        self.mod_s = Denorm(c_in, c_f, mode, norm, rng, gain, init)
        self.conv_s = Conv2d(c_in, c_out, 1, spectral=spectral, bias=False, rng=rng, gain=gain, init=init)

    def main(self, h: Tensor, f: Tensor) -> Tensor:
        dx = self.conv0(leaky_relu(self.mod0(h, f), LEAK))
        return self.conv1(leaky_relu(self.mod1(dx, f), LEAK))

    def skip(self, h: Tensor, f: Tensor) -> Tensor:
        return self.conv_s(self.mod_s(h, f))

    def __call__(self, h: Tensor, f: Tensor) -> Tensor:
        if h.shape[1] != self.c_in or f.shape[1] != self.c_f:
            raise ShapeMismatch(
                f"block expects {self.c_in} feature / {self.c_f} content channels, got {h.shape[1]} / {f.shape[1]}"
            )
        return add(self.skip(h, f), self.main(h, f))


def fate_resblock(h: Tensor, f: Tensor, p: FateResBlock) -> Tensor:
    return p(h, f)
