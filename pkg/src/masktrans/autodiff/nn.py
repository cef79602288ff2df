"""Parameter containers: a minimal module tree, conv layers, initialization."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .functional import conv2d, pad_circular, spectral_scale
from .tensor import Tensor, get_default_dtype


def xavier_normal(shape, gain: float = 0.02, rng: np.random.Generator | None = None, dtype=None) -> np.ndarray:
    """N(0, (gain * sqrt(2 / (fan_in + fan_out)))^2) with conv-style fans."""
    shape = tuple(shape)
    if len(shape) < 2:
        raise ValueError(f"xavier init needs at least 2 dims, got {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    std = gain * np.sqrt(2.0 / (fan_in + fan_out))
    rng = rng if rng is not None else np.random.default_rng()
    return (rng.standard_normal(shape) * std).astype(dtype or get_default_dtype())


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / max(n, 1e-12)


class Module:
    """Walks attributes in definition order to find parameters and buffers."""

    _buffer_names: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param:{k}": v.data for k, v in self.named_parameters()}
        state.update({f"buffer:{k}": v for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        for k, p in params.items():
            arr = state[f"param:{k}"]
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        owners = {}
        for mod_name, mod in self._named_modules():
            for b in mod._buffer_names:
                owners[f"{mod_name}{b}"] = (mod, b)
        for k, (mod, b) in owners.items():
            setattr(mod, b, np.array(state[f"buffer:{k}"], dtype=getattr(mod, b).dtype))

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value._named_modules(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._named_modules(f"{prefix}{name}.{i}.")

    def power_iteration(self) -> None:
        """Advance every spectral-norm estimate in the tree by one step."""
        for m in self.modules():
            if isinstance(m, Conv2d) and m.spectral:
                m.power_step()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    """3x3 (padding 1) or 1x1 (padding 0) convolution, optionally spectral-normalized.

    The spectral estimate (u, v) only changes through :meth:`power_step`, so a
    forward pass is a pure function of the parameters.
    """

    _buffer_names = ("u", "v")

    def __init__(
        self,
        cin: int,
        cout: int,
        k: int = 3,
        stride: int = 1,
        spectral: bool = False,
        bias: bool = True,
        rng: np.random.Generator | None = None,
        gain: float = 0.02,
        init: bool = True,
        padding_mode: str = "zeros",
    ):
        if k not in (1, 3):
            raise ValueError(f"kernel size must be 1 or 3, got {k}")
        dtype = get_default_dtype()
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.padding = 1 if k == 3 else 0
        self.padding_mode = padding_mode
        self.spectral = spectral
        shape = (cout, cin, k, k)
        w = xavier_normal(shape, gain, rng, dtype) if init else np.zeros(shape, dtype=dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        if spectral:
            u = rng.standard_normal(cout) if (init and rng is not None) else np.ones(cout)
            self.u = _unit(u).astype(dtype)
            self.v = _unit(self._mat().T @ self.u).astype(dtype)
        else:
            self.u = np.zeros(0, dtype=dtype)
            self.v = np.zeros(0, dtype=dtype)

    def _mat(self) -> np.ndarray:
        return self.weight.data.reshape(self.cout, -1)

    def power_step(self) -> None:
        w = self._mat()
        v = _unit(w.T @ self.u)
        if not np.any(v):  # all-zero weight: keep a valid unit vector
            v = np.zeros_like(v)
            v[0] = 1
        self.v = v.astype(w.dtype)
        self.u = _unit(w @ self.v).astype(w.dtype)

    def sigma(self) -> float:
        return float(self.u @ self._mat() @ self.v)

    def effective_weight(self) -> Tensor:
        if not self.spectral:
            return self.weight
        return spectral_scale(self.weight, self.u, self.v)

    def __call__(self, x: Tensor) -> Tensor:
        w = self.effective_weight()
        if self.padding_mode == "circular" and self.padding:
            return conv2d(pad_circular(x, self.padding), w, self.bias, self.stride, 0)
        return conv2d(x, w, self.bias, self.stride, self.padding)


def set_padding_mode(root: Module, mode: str) -> None:
    for m in root.modules():
        if isinstance(m, Conv2d):
            m.padding_mode = mode
