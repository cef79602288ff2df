"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from masktrans.autodiff import Tensor
from masktrans.autodiff import functional as F
from masktrans.autodiff.tensor import default_dtype, no_grad
from masktrans.denorm import AttentionParams, FadeParams, fade, fate
from masktrans.errors import SamplerExhausted
from masktrans.gradsuite import CASES, SEEDS, format_table, gradcheck_all
from masktrans.metrics import ckvd, mmd2_unbiased
from masktrans.nets import DiscriminatorConfig, GeneratorConfig, build_discriminator, build_generator
from masktrans.objectives import ToyFeatureProvider
from masktrans.sampling import SamplerConfig, acceptance_stats, sample_global_pair
from masktrans.segmask import alignment_mask, map_class
from masktrans.training import TrainConfig, lr_schedule

import oracles

ROOT = Path(__file__).resolve().parents[1]
RESULTS = ROOT / "results"

DOWN = [64, 128, 256, 512, 512]
BLOCKS = [1024, 1024, 1024, 512, 256, 128, 64, 64, 64, 64]


@pytest.fixture
def verdict(capsys):
    def report(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail

    return report


# 1 ---------------------------------------------------------------------------------

def test_criterion_1_gradient_suite(verdict):
    required = {"fade_block", "fate_block", "fate_resblock", "masked_global_loss", "local_loss",
                "perceptual_loss", "r1_penalty"}
    t0 = time.process_time()
    results = gradcheck_all(list(CASES), SEEDS)
    cpu = time.process_time() - t0
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    worst = max(r.max_error for r in results)
    ok = not failed and required <= set(CASES) and len(SEEDS) == 5 and cpu <= 300
    verdict(1, ok, f"{len(results)} checks x {len(SEEDS)} seeds, worst rel err {worst:.2e} (<= 1e-4), "
                   f"failed {failed}, {cpu:.1f}s CPU (<= 300s)")


# 2 ---------------------------------------------------------------------------------

def _blocky(rng, size=8, classes=3):
    g = rng.integers(0, classes, (size // 2, size // 2))
    return np.kron(g, np.ones((2, 2), dtype=int))


def test_criterion_2_alignment_and_sampler(verdict):
    rng = np.random.default_rng(2)
    exact = 0
    for _ in range(1000):
        d = int(rng.integers(2, 20))
        ca, cb = rng.integers(0, d, (16, 16)), rng.integers(0, d, (16, 16))
        m = alignment_mask(ca, cb)
        exact += m.dtype == np.uint8 and np.array_equal(m, oracles.label_equality_mask(ca, cb))

    cfg = SamplerConfig(global_crop=4, local_ratio=1.0, threshold=0.5, max_retries=5000)
    outside, accepted, rate_fail = 0, 0, []
    n_draws = 2000
    for seed in range(50):
        r = np.random.default_rng(seed)
        ca, cb = _blocky(r), _blocky(r)
        valid = oracles.valid_windows(ca, cb, 4, 0.5)
        for _ in range(20):
            try:
                pair = sample_global_pair(r.random((3, 8, 8)), r.random((3, 8, 8)), ca, cb, ca, cfg, r)
            except SamplerExhausted:
                break
            accepted += 1
            outside += (*pair.origin_a, *pair.origin_b) not in valid
        p = len(valid) / 5**4
        emp = acceptance_stats(ca, cb, cfg, r, draws=n_draws)["accept_rate"]
        if abs(emp - p) > 3 * np.sqrt(p * (1 - p) / n_draws):
            rate_fail.append(seed)
    ok = exact == 1000 and outside == 0 and accepted > 0 and not rate_fail
    verdict(2, ok, f"mask bit-exact {exact}/1000; {accepted} accepted windows, {outside} outside the "
                   f"exhaustive set; rate outside 3 SE on instances {rate_fail}")


# 3 ---------------------------------------------------------------------------------

def test_criterion_3_fate_reduces_to_fade(verdict):
    worst_on, worst_off = 0.0, 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        h = Tensor(rng.standard_normal((2, 4, 6, 6)))
        f = Tensor(rng.standard_normal((2, 3, 6, 6)))
        p, a = FadeParams(4, 3, rng, gain=1.0), AttentionParams(4, 3, rng, gain=1.0)
        a.conv2.weight.data[...] = 0
        a.conv2.bias.data[...] = 20.0
        ref = fade(h, f, p).data
        worst_on = max(worst_on, np.max(np.abs(fate(h, f, p, a).data - ref)) / np.max(np.abs(ref)))
        a.conv2.bias.data[...] = -20.0
        worst_off = max(worst_off, np.max(np.abs(fate(h, f, p, a).data)))
    ok = worst_on <= 1e-6 and worst_off <= 1e-6
    verdict(3, ok, f"bias +20: max|FATE-FADE|/max|FADE| = {worst_on:.2e}; bias -20: max|FATE| = {worst_off:.2e}")


# 4 ---------------------------------------------------------------------------------

def _bootstrap_std(X, Y, rng, n_boot=200):
    n = len(X)
    vals = []
    for _ in range(n_boot):
        idx = rng.integers(0, n, n)
        vals.append(mmd2_unbiased(X[idx], Y[idx]))
    return float(np.std(vals, ddof=1))


def test_criterion_4_mmd_estimator(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    for n, m, d in [(2, 2, 1), (5, 5, 3), (32, 32, 16), (7, 19, 16), (32, 11, 5), (16, 16, 8)]:
        X, Y = rng.standard_normal((n, d)), rng.standard_normal((m, d)) + 0.3
        worst = max(worst, abs(mmd2_unbiased(X, Y) - oracles.mmd2_loops(X, Y, paired=n == m)))
    inside = 0
    for trial in range(100):
        r = np.random.default_rng([4, trial])
        X, Y = r.standard_normal((100, 16)), r.standard_normal((100, 16))
        inside += abs(mmd2_unbiased(X, Y)) <= 3 * _bootstrap_std(X, Y, r)
    ok = worst <= 1e-12 and inside >= 95
    verdict(4, ok, f"max |fast - double loop| = {worst:.1e} (<= 1e-12); |MMD^2| <= 3 bootstrap std in {inside}/100")


# 5 ---------------------------------------------------------------------------------

def _road_scenes(seed, n=8, size=32):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        g = np.full((size, size), 98, dtype=np.uint16)
        h = int(rng.integers(8, 14))
        g[:h] = 142
        x0 = int(rng.integers(0, size - 12))
        g[h : h + 8, x0 : x0 + 12] = 176
        g[h : h + 10, :4] = 125
        out.append((rng.uniform(-1, 1, (3, size, size)), g))
    return out


def test_criterion_5_ckvd(verdict):
    provider = ToyFeatureProvider()
    corpus = _road_scenes(0)
    same = ckvd(corpus, corpus, provider, crop_ratio=0.25, n_pairs=16, seed=1)
    identical_ok = bool(same.per_class) and all(abs(v) <= 1e-6 for v in same.per_class.values())
    spots = {142: map_class(142), 98: map_class(98), 176: map_class(176)}
    spots_ok = spots == {142: "sky", 98: "road", 176: "vehicle"}
    rep = ckvd(_road_scenes(1), _road_scenes(2), provider, crop_ratio=0.25, n_pairs=16, seed=4)
    sp = [v for k, v in rep.per_class.items() if k not in ("sky", "person")]
    sp_err = abs(rep.avg_sp - float(np.mean(sp)))
    ok = identical_ok and spots_ok and {"sky", "person"} <= set(rep.per_class) and sp_err <= 1e-12
    verdict(5, ok, f"identical corpora per class {same.per_class}; map {spots}; |AVG_sp - recomputed| = {sp_err:.1e}")


# 6 ---------------------------------------------------------------------------------

def _ablation_arm(name: str) -> dict:
    path = RESULTS / f"ablation_{name}.json"
    if not path.exists():
        from masktrans.ablation import AblationConfig, run_arm

        RESULTS.mkdir(exist_ok=True)
        cfg = AblationConfig()
        arm = run_arm(cfg, name == "masked")
        from dataclasses import asdict

        path.write_text(json.dumps({"config": asdict(cfg), "arms": {name: {**asdict(arm), "mean": arm.mean}}},
                                   sort_keys=True, indent=2))
    raw = json.loads(path.read_text())
    return {"config": raw["config"], **raw["arms"][name]}


@pytest.mark.slow
def test_criterion_6_masking_ablation(verdict):
    arms = {k: _ablation_arm(k) for k in ("masked", "unmasked")}
    for a in arms.values():
        c = a["config"]
        assert c["steps"] == 20000 and c["size"] == 32 and len(c["seeds"]) == 3
        assert c["width_multiplier"] == 1 / 16
    m, u = arms["masked"]["mean"], arms["unmasked"]["mean"]
    cpu = {k: a["cpu_seconds"] for k, a in arms.items()}
    direction = m <= 0.5 * u
    budget = all(v <= 3600 for v in cpu.values())
    verdict(6, direction and budget,
            f"mean score masked {m:.4f} vs unmasked {u:.4f} (ratio {m / u if u else float('inf'):.3f}, need <= 0.5); "
            f"CPU minutes per arm {({k: round(v / 60, 1) for k, v in cpu.items()})} (need <= 60)")


# 7 ---------------------------------------------------------------------------------

def test_criterion_7_architecture(verdict):
    problems = []
    for width, scale in ((1.0, 1), (0.5, 2)):
        G = build_generator(GeneratorConfig(width), init=False)
        D = build_discriminator(DiscriminatorConfig(width), init=False)
        if D.layer_filters()["down"] != [c // scale for c in DOWN]:
            problems.append(f"down path at {width}")
        if G.layer_filters()["gen_blocks"] != [c // scale for c in BLOCKS]:
            problems.append(f"generator blocks at {width}")
        del G, D
    rng = np.random.default_rng(7)
    with default_dtype(np.float32), no_grad():
        D = build_discriminator(DiscriminatorConfig(0.5), rng)
        x = Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32))
        c = Tensor(np.eye(8, dtype=np.float32)[rng.integers(0, 8, (64, 64))].transpose(2, 0, 1)[None])
        n_maps = len(D(x, c))
        del D
        sizes = {}
        for width in (0.5, 1 / 16):
            G = build_generator(GeneratorConfig(width), rng)
            for s in (64, 352):
                x = Tensor(rng.standard_normal((1, 3, s, s)).astype(np.float32))
                c = Tensor(np.eye(8, dtype=np.float32)[rng.integers(0, 8, (s, s))].transpose(2, 0, 1)[None])
                sizes[(width, s)] = G(x, c).shape
            del G
    if n_maps != 3:
        problems.append(f"{n_maps} discriminator maps")
    problems += [f"G{k} -> {v}" for k, v in sizes.items() if v != (1, 3, k[1], k[1])]
    verdict(7, not problems, f"filter lists at widths 1 and 1/2, {n_maps} D maps, G output shapes "
                             f"{ {f'{w:g}@{s}': v[2:] for (w, s), v in sizes.items()} }; problems {problems}")


# 8 ---------------------------------------------------------------------------------

def test_criterion_8_lr_schedule(verdict):
    mismatches = 0
    for epoch_len, every in ((100, 3), (37, 1), (1000, 2)):
        cfg = TrainConfig(decay_every=every)
        got = [lr_schedule(s, epoch_len, cfg) for s in range(10_000)]
        closed = [max(0.0000125, 0.0001 * 0.5 ** ((s // epoch_len) // every)) for s in range(10_000)]
        iterated = oracles.lr_iterated(10_000, epoch_len, 0.0001, 0.0000125, every)
        mismatches += sum(a != b for a, b in zip(got, closed)) + sum(a != b for a, b in zip(got, iterated))
    verdict(8, mismatches == 0, f"10^4 steps x 3 schedules, {mismatches} values differ from the closed form")


# 9 ---------------------------------------------------------------------------------

def _cli(*args):
    env = dict(os.environ)
    return subprocess.run([sys.executable, "-m", "masktrans.cli", *args], capture_output=True, text=True, env=env)


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in ("report.json",)}


def test_criterion_9_determinism(tmp_path, verdict):
    data = tmp_path / "data"
    assert _cli("gen-data", "--out", str(data), "--n", "20", "--size", "32", "--seed", "0").returncode == 0
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        r = _cli("train", "--data", str(data), "--out", str(out), "--seed", "7", "--steps", "100",
                 "--train.dtype", "float64", "--sampler.global_crop", "32", "--sampler.base_height", "32",
                 "--train.checkpoint_every", "50")
        assert r.returncode == 0, r.stderr
        runs.append(_tree(out))
    a, b = runs
    differ = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    n_ckpt = sum(1 for k in a if k.endswith(".ftc1"))
    rows = a.get("telemetry.jsonl", b"").count(b"\n")
    ok = not differ and rows == 100 and n_ckpt > 0
    verdict(9, ok, f"{len(a)} files ({n_ckpt} checkpoint tensors, {rows} telemetry rows); differing {differ[:5]}")
