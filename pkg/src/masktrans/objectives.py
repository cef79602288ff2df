"""Adversarial, perceptual and gradient-penalty objectives.

Discriminators are any callable ``D(image, cond) -> list of score maps``.
Scores are averaged per map first and then across maps, so a coarse
prediction level counts as much as a fine one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import (
    Tensor,
    absolute,
    add,
    concat,
    getitem,
    grad,
    leaky_relu,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    tsum,
)
from .errors import ShapeMismatch
from .nets import two_scale_views

Discriminator = Callable[[Tensor, Tensor], Sequence[Tensor]]


@dataclass(frozen=True)
class LossWeights:
    global_adv: float = 1.0
    local_adv: float = 1.0
    perceptual: float = 1.0
    r1: float = 0.03

    def __post_init__(self):
        for name in ("global_adv", "local_adv", "perceptual", "r1"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def _mask_tensor(m, like: Tensor) -> Tensor:
    if isinstance(m, Tensor):
        m = m.data
    m = np.asarray(m, dtype=like.dtype)
    if m.ndim == 2:
        m = m[None, None]
    elif m.ndim == 3:
        m = m[:, None]
    if m.shape[2:] != like.shape[2:] or m.shape[1] != 1 or m.shape[0] not in (1, like.shape[0]):
        raise ShapeMismatch(f"mask {m.shape} does not broadcast over {like.shape}")
    return Tensor(m)


def mask_pair(x: Tensor, c: Tensor, m) -> tuple[Tensor, Tensor]:
    """Zero image and condition outside the alignment mask."""
    if x.shape[0] != c.shape[0] or x.shape[2:] != c.shape[2:]:
        raise ShapeMismatch(f"image {x.shape} and condition {c.shape} not aligned")
    mt = _mask_tensor(m, x)
    return mul(x, mt), mul(c, mt)


def _level_means(scores: Sequence[Tensor], fn) -> Tensor:
    total = None
    for s in scores:
        v = mean(fn(s))
        total = v if total is None else add(total, v)
    return mul(total, 1.0 / len(scores))


def hinge_d_loss(real_scores: Sequence[Tensor], fake_scores: Sequence[Tensor]) -> Tensor:
    if len(real_scores) != len(fake_scores):
        raise ShapeMismatch(f"{len(real_scores)} real vs {len(fake_scores)} fake prediction maps")
    real = _level_means(real_scores, lambda s: relu(1.0 - s))
    fake = _level_means(fake_scores, lambda s: relu(s + 1.0))
    return add(real, fake)


def hinge_g_loss(fake_scores: Sequence[Tensor]) -> Tensor:
    return _level_means(fake_scores, neg)


def _scale_views(x: Tensor, c: Tensor, scales: int):
    if scales == 1:
        return [(x, c)]
    if scales == 2:
        return [(v[0], v[1]) for v in two_scale_views(x, c)]
    raise ValueError(f"scales must be 1 or 2, got {scales}")


def _mean(values: list[Tensor]) -> Tensor:
    total = values[0]
    for v in values[1:]:
        total = add(total, v)
    return mul(total, 1.0 / len(values))


def masked_global_adv(D: Discriminator, f_b: Tensor, i_b: Tensor, c_a: Tensor, c_b: Tensor, m_ab,
                      scales: int = 2, which: str = "both", masked: bool = True):
    """Hinge losses of the masked conditional discriminator.

    Real branch: D(i_b * m | c_b * m).  Fake branch: D(f_b * m | c_a * m).
    The mask is applied at full resolution and the half-scale view is built
    from the masked tensors.  ``d_loss`` sees a detached ``f_b``.  Returns
    ``(d_loss, g_loss)``; entries not requested by ``which`` are None.
    """
    if which not in ("d", "g", "both"):
        raise ValueError(f"which must be 'd', 'g' or 'both', got {which!r}")
    if masked:
        real_x, real_c = mask_pair(i_b, c_b, m_ab)
        fake_x, fake_c = mask_pair(f_b, c_a, m_ab)
    else:
        real_x, real_c, fake_x, fake_c = i_b, c_b, f_b, c_a
    d_loss = g_loss = None
    if which in ("d", "both"):
        real_views = _scale_views(real_x, real_c, scales)
        fake_views = _scale_views(detach(fake_x), fake_c, scales)
        d_loss = _mean([hinge_d_loss(D(rx, rc), D(fx, fc)) for (rx, rc), (fx, fc) in zip(real_views, fake_views)])
    if which in ("g", "both"):
        g_loss = _mean([hinge_g_loss(D(fx, fc)) for fx, fc in _scale_views(fake_x, fake_c, scales)])
    return d_loss, g_loss


def patch_origins(patches, n: int = 0) -> np.ndarray:
    """(n, y, x) rows for :func:`functional.extract_patches` from a PatchBatch."""
    o = np.asarray(patches.origins, dtype=np.intp).reshape(-1, 2)
    return np.concatenate([np.full((len(o), 1), n, dtype=np.intp), o], axis=1)


def local_adv(D: Discriminator, patches, f_b: Tensor, i_b: Tensor, c_a: Tensor, c_b: Tensor,
              which: str = "both"):
    """Unmasked hinge losses on a batch of aligned patches, single scale.

    The patches are stacked into one batch, so the loss is the batch mean of
    the per-patch losses.
    """
    if which not in ("d", "g", "both"):
        raise ValueError(f"which must be 'd', 'g' or 'both', got {which!r}")
    o, s = patch_origins(patches), patches.size
    real_x, real_c = F.extract_patches(i_b, o, s), F.extract_patches(c_b, o, s)
    fake_c = F.extract_patches(c_a, o, s)
    d_loss = g_loss = None
    if which in ("d", "both"):
        fake_x = F.extract_patches(detach(f_b), o, s)
        d_loss = hinge_d_loss(D(real_x, real_c), D(fake_x, fake_c))
    if which in ("g", "both"):
        g_loss = hinge_g_loss(D(F.extract_patches(f_b, o, s), fake_c))
    return d_loss, g_loss


class FeatureProvider:
    """Deterministic image -> feature pyramid mapping with per-level weights."""

    def __init__(self, name: str, weights: Sequence[float], fn: Callable[[Tensor], list[Tensor]]):
        self.name = name
        self.weights = tuple(float(w) for w in weights)
        self.fn = fn

    def features(self, x: Tensor) -> list[Tensor]:
        feats = self.fn(x)
        if len(feats) != len(self.weights):
            raise ShapeMismatch(f"provider {self.name} returned {len(feats)} levels, expected {len(self.weights)}")
        return feats

    def vectors(self, x: np.ndarray) -> np.ndarray:
        """Per-image descriptor: channel means of every level, concatenated."""
        with no_grad():
            feats = self.features(Tensor(np.asarray(x)))
        return np.concatenate([f.data.mean(axis=(2, 3)) for f in feats], axis=1).astype(np.float64)


def identity_provider() -> FeatureProvider:
    return FeatureProvider("identity", (1.0,), lambda x: [x])


class ToyFeatureProvider(FeatureProvider):
    """Frozen random conv pyramid: three stride-2 3x3 layers with leaky ReLU.

    Channel widths (16, 16, 32) give a 64-d pooled vector.  Weights are drawn
    from a fixed seed and never trained.
    """

    def __init__(self, seed: int = 1234, channels: Sequence[int] = (16, 16, 32), in_channels: int = 3):
        rng = np.random.default_rng(seed)
        self.kernels = []
        cin = in_channels
        for cout in channels:
            w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
            b = rng.standard_normal(cout) * 0.1
            self.kernels.append((w, b))
            cin = cout
        self.seed = seed
        super().__init__(f"toy-{seed}", (1.0 / len(channels),) * len(channels), self._pyramid)

    @property
    def dim(self) -> int:
        return sum(w.shape[0] for w, _ in self.kernels)

    def _pyramid(self, x: Tensor) -> list[Tensor]:
        out = []
        h = x
        for w, b in self.kernels:
            h = leaky_relu(F.conv2d(h, Tensor(w.astype(x.dtype)), Tensor(b.astype(x.dtype)), 2, 1), 0.2)
            out.append(h)
        return out


def perceptual_loss(provider: FeatureProvider, f_b: Tensor, i_a: Tensor) -> Tensor:
    """Weighted sum over levels of the mean absolute feature difference."""
    if f_b.shape != i_a.shape:
        raise ShapeMismatch(f"perceptual loss inputs differ: {f_b.shape} vs {i_a.shape}")
    both = provider.features(concat([f_b, i_a], axis=0))
    n = f_b.shape[0]
    total = None
    for w, feat in zip(provider.weights, both):
        d = mean(absolute(getitem(feat, slice(0, n)) - getitem(feat, slice(n, 2 * n))))
        term = mul(d, w)
        total = term if total is None else add(total, term)
    return total


def r1_penalty(D: Discriminator, i_b: Tensor, c_b: Tensor, m_ab, lam: float, scales: int = 2,
               masked: bool = True) -> Tensor:
    """``lam`` times the per-sample squared norm of d(sum of scores)/d(input),
    averaged over samples and over discriminator scales.

    The input is the masked real image as fed to D at each scale.  The
    result stays on the tape so it can be differentiated w.r.t. D's weights.
    """
    x, c = mask_pair(i_b, c_b, m_ab) if masked else (i_b, c_b)
    terms = []
    for vx, vc in _scale_views(detach(x), Tensor(c.data), scales):
        leaf = Tensor(vx.data, requires_grad=True)
        scores = D(leaf, vc)
        total = tsum(scores[0])
        for s in scores[1:]:
            total = add(total, tsum(s))
        (g,) = grad(total, [leaf], create_graph=True)
        per_sample = tsum(mul(g, g), (1, 2, 3))
        terms.append(mean(per_sample))
    return mul(_mean(terms), lam)


def total_g_loss(parts: dict, w: LossWeights) -> Tensor:
    """Weighted generator objective over the global, local and perceptual terms.

    Missing parts count as zero.
    """
    total = 0.0
    for key, weight in (("global_adv", w.global_adv), ("local_adv", w.local_adv), ("perceptual", w.perceptual)):
        part = parts.get(key)
        if part is None:
            continue
        term = mul(part, weight) if isinstance(part, Tensor) else part * weight
        total = add(total, term) if isinstance(term, Tensor) or isinstance(total, Tensor) else total + term
    return total
