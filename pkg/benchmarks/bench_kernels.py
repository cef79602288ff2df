"""Compiled vs numpy kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json FILE]

Times conv2d forward, both conv2d gradients and the fused Adam update on
shapes that occur in a width-1/16 training step, then one full training
step per backend.
"""

from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from masktrans.autodiff import kernels

CONV_SHAPES = [
    # (n, c_in, h, w, c_out, k, stride, pad)
    (1, 11, 32, 32, 4, 3, 1, 1),
    (1, 64, 8, 8, 64, 3, 1, 1),
    (1, 3, 32, 32, 4, 3, 2, 1),
    (8, 16, 16, 16, 16, 3, 1, 1),
]


def bench_conv(shape, backend, repeat, rng):
    n, c, h, w, o, k, s, p = shape
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    wt = rng.standard_normal((o, c, k, k)).astype(np.float32)
    b = np.zeros(o, np.float32)
    y = kernels.conv2d_forward(x, wt, b, s, p)
    g = np.ones_like(y)
    with kernels.using_backend(backend):
        fwd = min(timeit.repeat(lambda: kernels.conv2d_forward(x, wt, b, s, p), number=20, repeat=repeat)) / 20
        gin = min(timeit.repeat(lambda: kernels.conv2d_grad_input(g, wt, x.shape, s, p), number=20, repeat=repeat)) / 20
        gw = min(timeit.repeat(lambda: kernels.conv2d_grad_weight(x, g, wt.shape, s, p), number=20, repeat=repeat)) / 20
    return {"forward": fwd, "grad_input": gin, "grad_weight": gw}


def bench_adam(size, backend, repeat, rng):
    p, g = rng.standard_normal(size).astype(np.float32), rng.standard_normal(size).astype(np.float32)
    m, v = np.zeros_like(p), np.zeros_like(p)
    with kernels.using_backend(backend):
        t = min(timeit.repeat(lambda: kernels.adam_update(p, g, m, v, 1e-4, 0.9, 0.999, 0.1, 0.001, 1e-8),
                              number=50, repeat=repeat)) / 50
    return {"adam": t}


def bench_step(backend, steps=10):
    from masktrans.ablation import AblationConfig, ablation_data
    from masktrans.training import Trainer

    cfg = AblationConfig(steps=steps, n_train=50, n_eval=1)
    spec, a, b, _ = ablation_data(cfg)
    with kernels.using_backend(backend):
        tr = Trainer(cfg.train_config(0, True), a, b, n_classes=spec.n_classes)
        tr.step()
        t = timeit.timeit(tr.step, number=steps) / steps
    return {"train_step": t}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None, help="write results here")
    ap.add_argument("--no-step", action="store_true", help="skip the full training-step timing")
    args = ap.parse_args(argv)
    backends = ["numpy"] + (["compiled"] if kernels.HAVE_EXTENSION else [])
    if len(backends) == 1:
        print("compiled extension not built; timing numpy only")
    rng = np.random.default_rng(0)
    rows = []
    for shape in CONV_SHAPES:
        res = {be: bench_conv(shape, be, args.repeat, rng) for be in backends}
        rows.append({"case": f"conv {shape}", **res})
    for size in (1_000, 100_000):
        rows.append({"case": f"adam {size}", **{be: bench_adam(size, be, args.repeat, rng) for be in backends}})
    if not args.no_step:
        rows.append({"case": "training step", **{be: bench_step(be) for be in backends}})

    print(f"{'case':<42} {'op':<12} " + " ".join(f"{be:>12}" for be in backends) + ("   speedup" if len(backends) > 1 else ""))
    for row in rows:
        for op in row[backends[0]]:
            ts = [row[be][op] for be in backends]
            line = f"{row['case']:<42} {op:<12} " + " ".join(f"{t * 1e6:10.1f}us" for t in ts)
            if len(ts) > 1:
                line += f"   {ts[0] / ts[1]:6.2f}x"
            print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
