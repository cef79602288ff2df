"""Discriminator-masking ablation on the biased synthetic task.

Each arm trains the same generator/discriminator pair on the same data; the
only difference is whether the global discriminator sees masked inputs.
Hallucination is measured by translating held-out domain-A images and
running :func:`training.hallucination_probe`.

Run the full experiment with ``python3 -m masktrans.ablation --out FILE``.
"""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .sampling import SamplerConfig
from .training import BiasSpec, TrainConfig, Trainer, gen_synthetic_dataset, hallucination_probe, translate


@dataclass
class AblationConfig:
    steps: int = 20000
    seeds: tuple[int, ...] = (0, 1, 2)
    size: int = 32
    n_train: int = 1000
    n_eval: int = 100
    data_seed: int = 2024
    width_multiplier: float = 1 / 16
    dtype: str = "float32"
    use_local_discriminator: bool = False

    def train_config(self, seed: int, masked: bool) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            seed=seed,
            width_multiplier=self.width_multiplier,
            mask_discriminator=masked,
            use_local_discriminator=self.use_local_discriminator,
            dtype=self.dtype,
            checkpoint_every=10**9,
            sampler=SamplerConfig(global_crop=self.size, base_height=self.size),
        )


@dataclass
class ArmResult:
    masked: bool
    scores: list[float] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)
    cpu_seconds: float = 0.0
    wall_seconds: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))


def ablation_data(cfg: AblationConfig, spec: BiasSpec | None = None):
    spec = spec or BiasSpec()
    rng = np.random.default_rng(cfg.data_seed)
    a, b = gen_synthetic_dataset(spec, cfg.n_train + cfg.n_eval, cfg.size, rng)
    return spec, a[: cfg.n_train], b[: cfg.n_train], a[cfg.n_train :]


def run_seed(cfg: AblationConfig, seed: int, masked: bool, data, logger=None) -> tuple[float, int]:
    spec, train_a, train_b, eval_a = data
    tr = Trainer(cfg.train_config(seed, masked), train_a, train_b, n_classes=spec.n_classes)
    log_every = max(cfg.steps // 20, 1) if logger else 0
    res = tr.run(log_every=log_every, logger=logger)
    outs = [translate(tr.G, img, grid, spec.n_classes) for img, grid in eval_a]
    rep = hallucination_probe(outs, [g for _, g in eval_a], spec)
    return rep.score, res.skipped


def run_arm(cfg: AblationConfig, masked: bool, data=None, logger=None) -> ArmResult:
    data = data or ablation_data(cfg)
    arm = ArmResult(masked)
    c0, w0 = time.process_time(), time.perf_counter()
    for seed in cfg.seeds:
        score, skipped = run_seed(cfg, seed, masked, data, logger)
        arm.scores.append(score)
        arm.skipped.append(skipped)
        if logger:
            logger({"arm": "masked" if masked else "unmasked", "seed": seed, "score": score, "skipped": skipped})
    arm.cpu_seconds = time.process_time() - c0
    arm.wall_seconds = time.perf_counter() - w0
    return arm


def run_ablation(cfg: AblationConfig, logger=None) -> dict:
    data = ablation_data(cfg)
    arms = {name: run_arm(cfg, name == "masked", data, logger) for name in ("masked", "unmasked")}
    m, u = arms["masked"].mean, arms["unmasked"].mean
    return {
        "config": asdict(cfg),
        "arms": {k: {**asdict(a), "mean": a.mean} for k, a in arms.items()},
        "ratio": m / u if u > 0 else float("inf"),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python3 -m masktrans.ablation", description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="result JSON path")
    ap.add_argument("--steps", type=int, default=AblationConfig.steps)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(AblationConfig.seeds))
    ap.add_argument("--arm", choices=("both", "masked", "unmasked"), default="both")
    args = ap.parse_args(argv)
    cfg = AblationConfig(steps=args.steps, seeds=tuple(args.seeds))

    def log(row):
        print(json.dumps(row, sort_keys=True), flush=True)

    if args.arm == "both":
        result = run_ablation(cfg, log)
    else:
        arm = run_arm(cfg, args.arm == "masked", logger=log)
        result = {"config": asdict(cfg), "arms": {args.arm: {**asdict(arm), "mean": arm.mean}}}
    with open(args.out, "w") as fh:
        json.dump(result, fh, sort_keys=True, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
