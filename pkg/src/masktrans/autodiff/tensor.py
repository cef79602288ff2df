"""Dense tensors with a reverse-mode gradient tape.

Every primitive records a vector-Jacobian product written in terms of other
primitives, so gradients can themselves be differentiated
(``grad(..., create_graph=True)``), which the R1 penalty needs.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()
_default_dtype = np.float64


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def set_grad_enabled(flag: bool):
    prev = is_grad_enabled()
    _local.enabled = flag
    try:
        yield
    finally:
        _local.enabled = prev


def no_grad():
    return set_grad_enabled(False)


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """f64 for gradient checks and tests, f32 for training."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


VJP = Callable[["Tensor", "Tensor"], Sequence["Tensor | None"]]
FastVJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An ndarray plus optional participation in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_fast", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(_default_dtype)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None
        self._fast = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm)

    def backward(self, grad_output=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` (ndarray) for every leaf."""
        cot, order = _backprop([self], [grad_output], create_graph=False, keep=None)
        for node in order:
            if node._vjp is None:
                g = cot.get(id(node))
                if g is None:
                    continue
                g = g.data if isinstance(g, Tensor) else g
                node.grad = np.array(g) if node.grad is None else node.grad + g


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, parents: tuple, vjp: VJP | None, fast: FastVJP | None = None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if vjp is not None and getattr(_local, "enabled", True) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._fast = fast
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
        out._fast = None
    return out


def primitive(data: np.ndarray, parents: Sequence[Tensor], vjp: VJP, fast: FastVJP | None = None) -> Tensor:
    """Register a new primitive result.

    ``vjp(g, out)`` returns one cotangent (or None) per parent and must be
    written with differentiable ops.  The optional ``fast(g)`` computes the
    same cotangents on raw arrays; it is used when no graph is being built.
    """
    return _make(data, tuple(parents), vjp, fast)


# -- tape traversal ----------------------------------------------------------

def _toposort(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(r, False) for r in roots if r.requires_grad]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop_fast(order, outputs, grad_outputs, keep):
    # same traversal as _backprop but on raw arrays; no graph is recorded
    cot: dict[int, np.ndarray] = {}
    for out, go in zip(outputs, grad_outputs):
        if not out.requires_grad:
            continue
        go = np.ones_like(out.data) if go is None else np.asarray(go.data if isinstance(go, Tensor) else go, dtype=out.dtype)
        prev = cot.get(id(out))
        cot[id(out)] = go if prev is None else prev + go
    with set_grad_enabled(False):
        for node in reversed(order):
            if node._vjp is None:
                continue
            key = id(node)
            g = cot.get(key)
            if g is None:
                continue
            if keep is None or key not in keep:
                del cot[key]
            if node._fast is not None:
                grads = node._fast(g)
            else:
                grads = [None if t is None else t.data for t in node._vjp(Tensor(g), node)]
            for p, gp in zip(node._parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                pk = id(p)
                prev = cot.get(pk)
                cot[pk] = gp if prev is None else prev + gp
    return cot


def _backprop(outputs, grad_outputs, create_graph, keep):
    order = _toposort(outputs)
    if not create_graph:
        return _backprop_fast(order, outputs, grad_outputs, keep), order
    cot: dict[int, Tensor] = {}
    for out, go in zip(outputs, grad_outputs):
        if not out.requires_grad:
            continue
        if go is None:
            go = Tensor(np.ones_like(out.data))
        elif not isinstance(go, Tensor):
            go = Tensor(np.asarray(go, dtype=out.dtype))
        prev = cot.get(id(out))
        cot[id(out)] = go if prev is None else prev + go
    with set_grad_enabled(create_graph):
        for node in reversed(order):
            if node._vjp is None:
                continue
            key = id(node)
            g = cot.get(key)
            if g is None:
                continue
            if keep is None or key not in keep:
                del cot[key]
            grads = node._vjp(g, node)
            for p, gp in zip(node._parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                pk = id(p)
                prev = cot.get(pk)
                cot[pk] = gp if prev is None else add(prev, gp)
    return cot, order


def grad(
    outputs: Tensor | Sequence[Tensor],
    inputs: Tensor | Sequence[Tensor],
    grad_outputs=None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``outputs`` w.r.t. ``inputs``.

    Inputs that do not influence the outputs get zero gradients.  With
    ``create_graph`` the returned tensors are themselves on the tape.
    """
    if isinstance(outputs, Tensor):
        outputs = [outputs]
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    if grad_outputs is None:
        grad_outputs = [None] * len(outputs)
    elif isinstance(grad_outputs, (Tensor, np.ndarray)):
        grad_outputs = [grad_outputs]
    keep = {id(x) for x in inputs}
    cot, _ = _backprop(list(outputs), list(grad_outputs), create_graph, keep)
    res = []
    for x in inputs:
        g = cot.get(id(x))
        if g is None:
            g = Tensor(np.zeros_like(x.data))
        elif not isinstance(g, Tensor):
            g = Tensor(np.array(g, dtype=x.dtype))
        res.append(g)
    return res


# -- broadcasting helpers ----------------------------------------------------

def _sum_to_data(a: np.ndarray, shape: tuple) -> np.ndarray:
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    return a.sum(axis=axes, keepdims=True).reshape(shape)


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def vjp(g, out):
        return (broadcast_to(g, x.shape),)

    def fast(g):
        return (np.broadcast_to(g, x.shape),)

    return _make(_sum_to_data(x.data, shape), (x,), vjp, fast)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def vjp(g, out):
        return (sum_to(g, x.shape),)

    def fast(g):
        return (_sum_to_data(g, x.shape),)

    return _make(np.broadcast_to(x.data, shape), (x,), vjp, fast)


# -- elementwise arithmetic --------------------------------------------------

def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a)
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g, out):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(g, b.shape) if b.requires_grad else None,
        )

    def fast(g):
        return (
            _sum_to_data(g, a.shape) if a.requires_grad else None,
            _sum_to_data(g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), vjp, fast)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g, out):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(neg(g), b.shape) if b.requires_grad else None,
        )

    def fast(g):
        return (
            _sum_to_data(g, a.shape) if a.requires_grad else None,
            _sum_to_data(-g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data - b.data, (a, b), vjp, fast)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g, out):
        return (
            sum_to(mul(g, b), a.shape) if a.requires_grad else None,
            sum_to(mul(g, a), b.shape) if b.requires_grad else None,
        )

    def fast(g):
        return (
            _sum_to_data(g * b.data, a.shape) if a.requires_grad else None,
            _sum_to_data(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), vjp, fast)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def vjp(g, out):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(mul(g, div(out, b))), b.shape) if b.requires_grad else None
        return ga, gb

    def fast(g):
        ga = _sum_to_data(g / b.data, a.shape) if a.requires_grad else None
        gb = _sum_to_data(-g * (a.data / b.data) / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), vjp, fast)


def neg(a: Tensor) -> Tensor:
    def vjp(g, out):
        return (neg(g),)

    def fast(g):
        return (-g,)

    return _make(-a.data, (a,), vjp, fast)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def vjp(g, out):
        if p == 2.0:
            return (mul(g, mul(a, 2.0)),)
        return (mul(g, mul(power(a, p - 1.0), p)),)

    def fast(g):
        if p == 2.0:
            return (g * (a.data * 2.0),)
        return (g * (a.data ** (p - 1.0) * p),)

    return _make(a.data**p, (a,), vjp, fast)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def vjp(g, out):
        return (mul(g, out),)

    def fast(g):
        return (g * data,)

    return _make(data, (a,), vjp, fast)


def log(a: Tensor) -> Tensor:
    def vjp(g, out):
        return (div(g, a),)

    def fast(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), vjp, fast)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def vjp(g, out):
        return (mul(g, sub(1.0, mul(out, out))),)

    def fast(g):
        return (g * (1.0 - data * data),)

    return _make(data, (a,), vjp, fast)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def vjp(g, out):
        return (mul(g, mul(out, sub(1.0, out))),)

    def fast(g):
        return (g * (data * (1.0 - data)),)

    return _make(data, (a,), vjp, fast)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    scale = np.where(x > 0, 1.0, slope).astype(x.dtype, copy=False)

    def vjp(g, out):
        return (mul(g, Tensor(scale)),)

    def fast(g):
        return (g * scale,)

    return _make(x * scale, (a,), vjp, fast)


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def vjp(g, out):
        return (mul(g, Tensor(sign)),)

    def fast(g):
        return (g * sign,)

    return _make(np.abs(a.data), (a,), vjp, fast)


# -- reductions and shape ops ------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def vjp(g, out):
        if not keepdims:
            g = reshape(g, kshape)
        return (broadcast_to(g, a.shape),)

    def fast(g):
        return (np.broadcast_to(np.reshape(g, kshape), a.shape),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), vjp, fast)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for i in axes:
        count *= a.shape[i]
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def vjp(g, out):
        return (reshape(g, a.shape),)

    def fast(g):
        return (np.reshape(g, a.shape),)

    return _make(a.data.reshape(shape), (a,), vjp, fast)


def transpose(a: Tensor, perm) -> Tensor:
    perm = tuple(perm)
    inv = tuple(int(i) for i in np.argsort(perm))

    def vjp(g, out):
        return (transpose(g, inv),)

    def fast(g):
        return (np.transpose(g, inv),)

    return _make(a.data.transpose(perm), (a,), vjp, fast)


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def _scatter_add(shape, idx, g: np.ndarray) -> np.ndarray:
    full = np.zeros(shape, dtype=g.dtype)
    if _is_basic(idx):
        full[idx] = g
    else:  # repeated integer-array entries must accumulate
        np.add.at(full, idx, g)
    return full


def getitem(a: Tensor, idx) -> Tensor:
    def vjp(g, out):
        return (index_put_zeros(g, idx, a.shape),)

    def fast(g):
        return (_scatter_add(a.shape, idx, g),)

    return _make(a.data[idx], (a,), vjp, fast)


def index_put_zeros(g: Tensor, idx, shape) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``idx`` (adjoint of getitem)."""

    def vjp(gg, out):
        return (getitem(gg, idx),)

    def fast(gg):
        return (gg[idx],)

    return _make(_scatter_add(shape, idx, g.data), (g,), vjp, fast)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])
    slices = [(slice(None),) * axis + (slice(int(lo), int(hi)),) for lo, hi in zip(bounds[:-1], bounds[1:])]

    def vjp(g, out):
        return [getitem(g, idx) if x.requires_grad else None for x, idx in zip(xs, slices)]

    def fast(g):
        return [g[idx] if x.requires_grad else None for x, idx in zip(xs, slices)]

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), vjp, fast)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    exp_shape = lambda x: x.shape[:axis] + (1,) + x.shape[axis:]  # noqa: E731
    return concat([reshape(x, exp_shape(x)) for x in xs], axis=axis)


def where_const(mask: np.ndarray, a: Tensor, fill: float = 0.0) -> Tensor:
    """``a`` where ``mask`` else ``fill``; the mask is not differentiated."""
    m = Tensor(mask.astype(a.dtype))
    return add(mul(a, m), fill * (1.0 - m.data)) if fill else mul(a, m)
