"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad


def finite_diff_check(
    f: Callable[..., Tensor],
    xs: Sequence[np.ndarray] | np.ndarray,
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over coordinates of |g_a - g_n| / max(1, |g_a|, |g_n|).

    ``f`` maps leaf tensors (one per array in ``xs``) to a scalar tensor.
    With ``max_coords`` only a random subset of coordinates per input is
    probed numerically.
    """
    if isinstance(xs, np.ndarray):
        xs = [xs]
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in xs]
    out = f(*leaves)
    if out.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    analytic = [g.data for g in grad(out, leaves)]
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    # numeric passes keep the tape on: f may itself call grad() (R1 penalty)
    for leaf, ga in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        gflat = ga.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(*leaves).data)
            flat[i] = orig - eps
            fm = float(f(*leaves).data)
            flat[i] = orig
            gn = (fp - fm) / (2 * eps)
            a = float(gflat[i])
            err = abs(a - gn) / max(1.0, abs(a), abs(gn))
            worst = max(worst, err)
    return worst
