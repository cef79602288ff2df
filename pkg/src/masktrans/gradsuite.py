"""Finite-difference checks for every differentiable op and composite block.

Each case builds a scalar function of float64 leaves from a seed.  Ops are
wrapped as ``sum(op(x) * W)`` with a random ``W`` so every output element
contributes a distinct cotangent.  Inputs to kinked ops (abs, leaky ReLU)
are kept away from zero so the central difference does not straddle a kink.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import functional as F
from .autodiff.gradcheck import finite_diff_check
from .autodiff.tensor import (
    Tensor,
    absolute,
    add,
    broadcast_to,
    concat,
    default_dtype,
    div,
    exp,
    getitem,
    leaky_relu,
    log,
    mean,
    mul,
    neg,
    power,
    reshape,
    sigmoid,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
    where_const,
)

TOLERANCE = 1e-4
SEEDS = (0, 1, 2, 3, 4)


@dataclass
class CheckResult:
    name: str
    max_error: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= TOLERANCE)


Case = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray], int | None]]


def _weighted(op, shape_fn=None):
    """Case for an elementwise/shape op: sum(op(*xs) * W)."""

    def build(rng, *shapes, away_from_zero=False, positive=False):
        xs = [rng.standard_normal(s) for s in shapes]
        if positive:
            xs = [np.abs(x) + 0.5 for x in xs]
        elif away_from_zero:
            xs = [np.sign(x) * (np.abs(x) + 0.1) for x in xs]
        with default_dtype(np.float64):
            out_shape = op(*[Tensor(x) for x in xs]).shape
        w = rng.standard_normal(out_shape)
        return (lambda *ts: tsum(mul(op(*ts), Tensor(w)))), xs, None

    return build


def _unary(op, **kw):
    b = _weighted(op)
    return lambda rng: b(rng, (2, 3, 4), **kw)


def _binary(op, shapes=((2, 3, 4), (2, 3, 4)), **kw):
    b = _weighted(op)
    return lambda rng: b(rng, *shapes, **kw)


def _conv_case(stride, pad, bias=True):
    def build(rng):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        xs = [x, w] + ([rng.standard_normal(4)] if bias else [])

        def op(*ts):
            return F.conv2d(ts[0], ts[1], ts[2] if bias else None, stride, pad)

        with default_dtype(np.float64):
            shape = op(*[Tensor(a) for a in xs]).shape
        cw = rng.standard_normal(shape)
        return (lambda *ts: tsum(mul(op(*ts), Tensor(cw)))), xs, None

    return build


def _conv_double_backward(rng):
    # exercises the grad-input / grad-weight primitives through create_graph
    from .autodiff.tensor import grad

    x0 = rng.standard_normal((1, 2, 5, 5))
    w0 = rng.standard_normal((3, 2, 3, 3))
    cw = rng.standard_normal((1, 3, 3, 3))

    def f(x, w):
        y = tsum(mul(power(F.conv2d(x, w, None, 2, 1), 2.0), Tensor(cw)))
        gx, gw = grad(y, [x, w], create_graph=True)
        return add(tsum(mul(gx, gx)), tsum(mul(gw, gw)))

    return f, [x0, w0], None


def _resize_case(size, mode):
    def build(rng):
        x = rng.standard_normal((1, 2, 6, 8))
        with default_dtype(np.float64):
            shape = F.resize(Tensor(x), size, mode).shape
        w = rng.standard_normal(shape)
        return (lambda t: tsum(mul(F.resize(t, size, mode), Tensor(w)))), [x], None

    return build


def _patches_case(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    o = np.array([[0, 0, 0], [1, 2, 3], [0, 1, 1], [1, 4, 4]])
    w = rng.standard_normal((4, 3, 4, 4))
    return (lambda t: tsum(mul(F.extract_patches(t, o, 4), Tensor(w)))), [x], None


def _norm_case(kind):
    def build(rng):
        x = rng.standard_normal((2, 3, 4, 5)) * 2 + 1
        w = rng.standard_normal(x.shape)
        return (lambda t: tsum(mul(F.normalize(t, kind), Tensor(w)))), [x], None

    return build


def _spectral_case(rng):
    w0 = rng.standard_normal((4, 3, 3, 3))
    u = rng.standard_normal(4)
    u /= np.linalg.norm(u)
    v = w0.reshape(4, -1).T @ u
    v /= np.linalg.norm(v)
    c = rng.standard_normal(w0.shape)
    return (lambda t: tsum(mul(F.spectral_scale(t, u, v), Tensor(c)))), [w0], None


def _modulate_case(gated):
    def build(rng):
        xs = [rng.standard_normal((2, 3, 4, 4)) for _ in range(4 if gated else 3)]
        c = rng.standard_normal((2, 3, 4, 4))
        return (lambda *ts: tsum(mul(F.modulate(*ts), Tensor(c)))), xs, None

    return build


# -- composite blocks ------------------------------------------------------------

def _with_params(module, fn, inputs, rng, n_params=2, max_coords=12):
    """Check w.r.t. the given inputs plus a few randomly chosen module
    parameters, which ``fn`` receives as identity-keyed overrides."""
    params = module.parameters()
    picks = sorted(rng.choice(len(params), min(n_params, len(params)), replace=False))
    chosen = [params[i] for i in picks]

    def f(*ts):
        k = len(inputs)
        return fn(*ts[:k], overrides=dict(zip(map(id, chosen), ts[k:])))

    return f, list(inputs) + [p.data.copy() for p in chosen], max_coords


def _swap(module, overrides):
    """Temporarily replace parameters (by identity) with leaf tensors."""
    from .autodiff.nn import Module

    swapped = []

    def visit(m):
        for name, val in list(vars(m).items()):
            if isinstance(val, Tensor) and id(val) in overrides:
                setattr(m, name, overrides[id(val)])
                swapped.append((m, name, val))
            elif isinstance(val, Module):
                visit(val)
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        visit(item)

    visit(module)
    return swapped


def _unswap(swapped):
    for m, name, val in swapped:
        setattr(m, name, val)


def _module_case(make, make_inputs, loss):
    """Generic composite: ``loss(module, *input_tensors)`` w.r.t. inputs and parameters."""

    def build(rng):
        with default_dtype(np.float64):
            module = make(rng)
        inputs = make_inputs(rng)

        def fn(*ts, overrides):
            swapped = _swap(module, overrides)
            try:
                return loss(module, *ts)
            finally:
                _unswap(swapped)

        f, xs, mc = _with_params(module, fn, inputs, rng)
        return f, xs, mc

    return build


def _denorm_case(mode):
    from .denorm import Denorm

    def loss(d, h, f):
        out = d(h, f)
        return tsum(mul(out, Tensor(np.cos(np.arange(out.size)).reshape(out.shape))))

    return _module_case(
        lambda rng: Denorm(3, 2, mode, rng=rng, gain=1.0),
        lambda rng: [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 2, 4, 4))],
        loss,
    )


def _resblock_case(rng):
    from .denorm import FateResBlock

    def loss(b, h, f):
        out = b(h, f)
        return tsum(mul(out, Tensor(np.sin(np.arange(out.size)).reshape(out.shape))))

    return _module_case(
        lambda r: FateResBlock(3, 2, 2, "fate", spectral=True, rng=r, gain=1.0),
        lambda r: [r.standard_normal((1, 3, 4, 4)), r.standard_normal((1, 2, 4, 4))],
        loss,
    )(rng)


def _small_disc(rng):
    from .nets import DiscriminatorConfig, build_discriminator

    return build_discriminator(DiscriminatorConfig(width_multiplier=1 / 32, cond_channels=3), rng)


def _seg_inputs(rng, size=16):
    i_b = rng.standard_normal((1, 3, size, size)) * 0.5
    ca = rng.integers(0, 3, (size, size))
    cb = np.where(rng.random((size, size)) < 0.7, ca, rng.integers(0, 3, (size, size)))
    onehot = lambda g: np.eye(3)[g].transpose(2, 0, 1)[None]
    return i_b, onehot(ca), onehot(cb), (ca == cb).astype(np.uint8)


def _adv_case(rng, loss_fn, size):
    """Both halves of an adversarial loss: the discriminator loss w.r.t. D's
    parameters (its fake input is detached, so it is constant in ``f_b``)
    and the generator loss w.r.t. ``f_b`` and D's parameters."""
    i_b, c_a, c_b, m = _seg_inputs(rng, size)
    f_b0 = rng.standard_normal(i_b.shape) * 0.5
    with default_dtype(np.float64):
        D = _small_disc(rng)
    fixed = [Tensor(a) for a in (i_b, c_a, c_b)]

    def d_part(D):
        return loss_fn(D, Tensor(f_b0), *fixed, m, "d")[0]

    def g_part(D, f_b):
        return loss_fn(D, f_b, *fixed, m, "g")[1]

    fd, xd, _ = _module_case(lambda r: D, lambda r: [], d_part)(rng)
    fg, xg, mc = _module_case(lambda r: D, lambda r: [f_b0], g_part)(rng)
    nd = len(xd)
    return (lambda *ts: add(fd(*ts[:nd]), fg(*ts[nd:]))), xd + xg, mc


def _global_loss_case(rng):
    from .objectives import masked_global_adv

    def loss(D, f_b, i_b, c_a, c_b, m, which):
        return masked_global_adv(D, f_b, i_b, c_a, c_b, m, which=which)

    return _adv_case(rng, loss, 16)


def _local_loss_case(rng):
    from .objectives import local_adv
    from .sampling import PatchBatch

    ys, xs = rng.integers(0, 25, 4), rng.integers(0, 25, 4)
    patches = PatchBatch([((int(y), int(x), 8, 8), (int(y), int(x), 8, 8)) for y, x in zip(ys, xs)], 8, 4)

    def loss(D, f_b, i_b, c_a, c_b, m, which):
        return local_adv(D, patches, f_b, i_b, c_a, c_b, which=which)

    return _adv_case(rng, loss, 32)


def _perceptual_case(rng):
    from .objectives import ToyFeatureProvider, perceptual_loss

    provider = ToyFeatureProvider(int(rng.integers(1000)), channels=(4, 4, 8))
    a = rng.standard_normal((1, 3, 16, 16))
    b = rng.standard_normal((1, 3, 16, 16))
    return (lambda fb, ia: perceptual_loss(provider, fb, ia)), [a, b], 40


def _r1_case(rng):
    from .objectives import r1_penalty

    i_b, _, c_b, m = _seg_inputs(rng)

    def loss(D):
        return r1_penalty(D, Tensor(i_b), Tensor(c_b), m, 0.03)

    return _module_case(_small_disc, lambda r: [], loss)(rng)


CASES: dict[str, Case] = {
    "add": _binary(add, ((2, 3, 4), (3, 1))),
    "sub": _binary(sub, ((2, 3, 4), (2, 1, 4))),
    "mul": _binary(mul, ((2, 3, 4), (4,))),
    "div": _binary(div, positive=True),
    "neg": _unary(neg),
    "power": _unary(lambda t: power(t, 3.0)),
    "power_frac": _unary(lambda t: power(t, -0.5), positive=True),
    "exp": _unary(exp),
    "log": _unary(log, positive=True),
    "tanh": _unary(tanh),
    "sigmoid": _unary(sigmoid),
    "leaky_relu": _unary(lambda t: leaky_relu(t, 0.2), away_from_zero=True),
    "absolute": _unary(absolute, away_from_zero=True),
    "sum_axis": _unary(lambda t: tsum(t, 1, keepdims=True)),
    "mean": _unary(lambda t: mean(t, (0, 2))),
    "reshape": _unary(lambda t: reshape(t, (4, 6))),
    "transpose": _unary(lambda t: transpose(t, (2, 0, 1))),
    "getitem": _unary(lambda t: getitem(t, (slice(None), slice(1, 3), [0, 2, 2]))),
    "broadcast_to": _binary(lambda t: broadcast_to(t, (2, 3, 4)), ((3, 1),)),
    "concat": _binary(lambda a, b: concat([a, b], axis=1), ((2, 3, 4), (2, 2, 4))),
    "stack": _binary(lambda a, b: stack([a, b], axis=0)),
    "where_const": _unary(lambda t: where_const(np.arange(24).reshape(2, 3, 4) % 3 == 0, t, 0.0)),
    "conv2d": _conv_case(1, 1),
    "conv2d_stride2": _conv_case(2, 1),
    "conv2d_nobias_valid": _conv_case(1, 0, bias=False),
    "conv2d_double_backward": _conv_double_backward,
    "pad_circular": _unary(lambda t: F.pad_circular(reshape(t, (1, 2, 3, 4)), 1)),
    "resize_bilinear_down": _resize_case((3, 4), "bilinear"),
    "resize_bilinear_up": _resize_case((9, 11), "bilinear"),
    "resize_nearest": _resize_case((12, 4), "nearest"),
    "extract_patches": _patches_case,
    "instance_norm": _norm_case("instance"),
    "batch_norm": _norm_case("batch"),
    "spectral_scale": _spectral_case,
    "modulate": _modulate_case(False),
    "modulate_gated": _modulate_case(True),
    "fade_block": _denorm_case("fade"),
    "fate_block": _denorm_case("fate"),
    "fate_resblock": _resblock_case,
    "masked_global_loss": _global_loss_case,
    "local_loss": _local_loss_case,
    "perceptual_loss": _perceptual_case,
    "r1_penalty": _r1_case,
}


def run_case(name: str, seeds=SEEDS) -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng([seed, 7])
        f, xs, max_coords = CASES[name](rng)
        with default_dtype(np.float64):
            err = finite_diff_check(f, xs, max_coords=max_coords, rng=rng)
        worst = max(worst, err)
    return CheckResult(name, worst, len(seeds), time.perf_counter() - t0)


def gradcheck_all(names=None, seeds=SEEDS) -> list[CheckResult]:
    return [run_case(n, seeds) for n in (names or CASES)]


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  seeds  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_error:12.3e}  {r.seeds:>5}  {'pass' if r.passed else 'FAIL'}")
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} checks passed (tolerance {TOLERANCE:g})")
    return "\n".join(lines)
