"""Training loop, synthetic biased two-domain data, inference and the
hallucination probe used by the masking ablation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Adam, Tensor, default_dtype, grad, no_grad
from .errors import SamplerExhausted, ShapeMismatch
from .io import decode_ftc1, encode_ftc1
from .nets import (
    DiscriminatorConfig,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    config_dict,
    config_from_dict,
)
from .objectives import (
    LossWeights,
    ToyFeatureProvider,
    local_adv,
    masked_global_adv,
    perceptual_loss,
    r1_penalty,
    total_g_loss,
)
from .sampling import SamplerConfig, preprocess, random_crop_pair, sample_global_pair, sample_local_patches
from .segmask import onehot_array

# -- synthetic data ------------------------------------------------------------

SYNTH_CLASSES = ("sky", "ground", "building", "tree", "vehicle")
SKY, GROUND, BUILDING, TREE, VEHICLE = range(5)


@dataclass(frozen=True)
class PlacementRule:
    """Where instances of one class go.  ``region`` is ``anywhere``, ``top``
    (whole shape inside the upper half) or ``bottom`` (inside the lower half)."""

    region: str = "anywhere"
    probability: float = 0.5
    max_count: int = 2
    shape: str = "disc"

    def __post_init__(self):
        if self.region not in ("anywhere", "top", "bottom"):
            raise ValueError(f"unknown region {self.region!r}")
        if self.shape not in ("disc", "rect"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if not 0 <= self.probability <= 1:
            raise ValueError("probability must be in [0, 1]")


def _default_rules():
    common = {
        BUILDING: PlacementRule("anywhere", 0.6, 2, "rect"),
        VEHICLE: PlacementRule("bottom", 0.5, 2, "rect"),
    }
    return {
        "A": {**common, TREE: PlacementRule("bottom", 0.5, 2, "disc")},
        "B": {**common, TREE: PlacementRule("top", 0.9, 2, "disc")},
    }


def _default_colors():
    # rows follow SYNTH_CLASSES; values in [-1, 1]
    return {
        "A": ((0.2, 0.5, 0.9), (-0.3, -0.5, -0.6), (0.6, 0.6, 0.6), (-0.6, 0.4, -0.6), (0.9, -0.7, -0.7)),
        "B": ((0.8, 0.8, 0.3), (-0.7, -0.1, -0.3), (0.1, -0.3, 0.7), (0.3, 0.9, -0.2), (-0.8, -0.8, 0.9)),
    }


@dataclass(frozen=True)
class BiasSpec:
    """Class vocabulary, per-domain placement rules and colors.

    Sky fills the rows above a random horizon and ground the rest; the rule
    classes are painted on top in ascending class order.  By default the
    biased class (tree) sits in the lower half in domain A and in the upper
    half in domain B.
    """

    class_names: tuple[str, ...] = SYNTH_CLASSES
    biased_class: int = TREE
    rules: dict = field(default_factory=_default_rules)
    colors: dict = field(default_factory=_default_colors)
    noise: float = 0.05

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def color_table(self, domain: str) -> np.ndarray:
        return np.asarray(self.colors[domain], dtype=np.float64)

    def with_rules(self, domain: str, rules: dict) -> "BiasSpec":
        new = dict(self.rules)
        new[domain] = {**self.rules[domain], **rules}
        return replace(self, rules=new)


def _paint(grid: np.ndarray, cls: int, rule: PlacementRule, rng: np.random.Generator) -> None:
    s = grid.shape[0]
    lo, hi = {"anywhere": (0, s), "top": (0, s // 2), "bottom": (s // 2, s)}[rule.region]
    yy, xx = np.mgrid[0:s, 0:s]
    for _ in range(int(rng.integers(1, rule.max_count + 1))):
        if rule.shape == "disc":
            r = int(rng.integers(max(2, s // 12), max(3, s // 6) + 1))
            r = min(r, (hi - lo - 1) // 2)
            # rows cy - r .. cy + r must stay inside [lo, hi)
            cy = int(rng.integers(lo + r, hi - r))
            cx = int(rng.integers(0, s))
            grid[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
        else:
            h = int(rng.integers(max(2, s // 10), max(3, (hi - lo) // 2) + 1))
            w = int(rng.integers(max(2, s // 10), max(3, s // 4) + 1))
            y0 = int(rng.integers(lo, hi - h + 1))
            x0 = int(rng.integers(0, s - w + 1))
            grid[y0 : y0 + h, x0 : x0 + w] = cls


def render_layout(spec: BiasSpec, domain: str, size: int, rng: np.random.Generator) -> np.ndarray:
    grid = np.full((size, size), GROUND, dtype=np.uint16)
    horizon = int(rng.integers(int(0.35 * size), int(0.6 * size) + 1))
    grid[:horizon] = SKY
    for cls in sorted(spec.rules[domain]):
        rule = spec.rules[domain][cls]
        # always draw so the layout stream stays aligned across domains
        present = rng.random() < rule.probability
        sub = np.random.default_rng(rng.integers(2**63))
        if present:
            _paint(grid, cls, rule, sub)
    return grid


def render_image(grid: np.ndarray, colors: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    img = colors[grid].transpose(2, 0, 1).copy()
    if noise > 0:
        img += rng.normal(0.0, noise, img.shape)
    return np.clip(img, -1.0, 1.0)


def gen_synthetic_dataset(spec: BiasSpec, n_images: int, size: int, rng: np.random.Generator):
    """Two lists of (image (3, S, S) in [-1, 1], class grid (S, S)).

    Both domains draw layouts from generators with the same seed, so equal
    placement rules give identical segmentations and the domains differ only
    in colors and noise.
    """
    if size < 32:
        raise ValueError("synthetic images must be at least 32 pixels")
    layout_seed, noise_seed = (int(v) for v in rng.integers(2**63, size=2))
    out = {}
    for k, dom in enumerate(("A", "B")):
        lr = np.random.default_rng(layout_seed)
        nr = np.random.default_rng([noise_seed, k])
        colors = spec.color_table(dom)
        pairs = []
        for _ in range(n_images):
            grid = render_layout(spec, dom, size, lr)
            pairs.append((render_image(grid, colors, spec.noise, nr), grid))
        out[dom] = pairs
    return out["A"], out["B"]


# -- hallucination probe -------------------------------------------------------

@dataclass
class HallucinationReport:
    score: float
    per_class: dict[str, float]
    pixels: int

    def to_dict(self) -> dict:
        return asdict(self)


def nearest_color_class(image: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """Index of the closest palette color for every pixel of a (3, H, W) image."""
    d = ((image.transpose(1, 2, 0)[:, :, None, :] - colors[None, None]) ** 2).sum(-1)
    return d.argmin(-1)


def hallucination_probe(translated, source_grids, spec: BiasSpec) -> HallucinationReport:
    """Fraction of pixels painted in the target domain's biased-class color
    where the source segmentation has a different class."""
    colors = spec.color_table("B")
    k = spec.biased_class
    offending = np.zeros(spec.n_classes, dtype=np.int64)
    total = 0
    for img, grid in zip(translated, source_grids):
        img = np.asarray(img, dtype=np.float64)
        if img.shape[1:] != grid.shape:
            raise ShapeMismatch(f"translated image {img.shape} does not match segmentation {grid.shape}")
        bad = (nearest_color_class(img, colors) == k) & (grid != k)
        offending += np.bincount(grid[bad].astype(np.intp), minlength=spec.n_classes)[: spec.n_classes]
        total += grid.size
    per_class = {spec.class_names[c]: offending[c] / total for c in range(spec.n_classes) if c != k}
    return HallucinationReport(float(offending.sum() / total), per_class, total)


# -- schedule ------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 1000
    lr0: float = 0.0001
    lr_floor: float = 0.0000125
    decay_every: int = 3
    seed: int = 0
    width_multiplier: float = 1 / 16
    denorm: str = "fate"
    mask_discriminator: bool = True
    use_local_discriminator: bool = True
    sampling: str = "similarity"
    dtype: str = "float32"
    checkpoint_every: int = 1000
    perceptual_seed: int = 1234
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr0 < self.lr_floor:
            raise ValueError("lr0 must be >= lr_floor")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.sampling not in ("similarity", "random"):
            raise ValueError(f"sampling must be 'similarity' or 'random', got {self.sampling!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.denorm not in ("fate", "fade"):
            raise ValueError(f"denorm must be fate or fade, got {self.denorm!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        sampler = SamplerConfig(**raw.pop("sampler", {}))
        weights = LossWeights(**raw.pop("weights", {}))
        return cls(sampler=sampler, weights=weights, **raw)


def lr_schedule(step: int, epoch_len: int, cfg: TrainConfig) -> float:
    """Step decay: halve every ``decay_every`` epochs, never below the floor."""
    epoch = step // epoch_len
    return max(cfg.lr_floor, cfg.lr0 * 0.5 ** (epoch // cfg.decay_every))


# -- trainer ---------------------------------------------------------------------

def _onehot(grid: np.ndarray, d: int, dtype) -> Tensor:
    return Tensor(onehot_array(grid, d, dtype)[None])


def _image(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype)[None])


@dataclass
class TrainResult:
    steps: int
    skipped: int
    telemetry: list[dict]
    seconds: float


class Trainer:
    """Alternating discriminator/generator updates, one of each per step.

    Every step draws from its own generator ``default_rng([seed, step])``, so
    a run is reproducible step by step regardless of skipped pairs.
    """

    def __init__(self, cfg: TrainConfig, domain_a, domain_b, n_classes: int | None = None, out_dir=None):
        if not domain_a or not domain_b:
            raise ValueError("both domains need at least one image")
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.domain_a, self.domain_b = list(domain_a), list(domain_b)
        max_id = max(int(g.max()) for _, g in self.domain_a + self.domain_b)
        self.n_classes = max(n_classes or 0, max_id + 1)
        self.epoch_len = len(self.domain_a)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        init_rng = np.random.default_rng([cfg.seed, 2**32 - 1])
        with default_dtype(self.dtype):
            self.gcfg = GeneratorConfig(cfg.width_multiplier, self.n_classes, denorm=cfg.denorm)
            self.dcfg = DiscriminatorConfig(cfg.width_multiplier, self.n_classes)
            self.G = build_generator(self.gcfg, init_rng)
            self.D = build_discriminator(self.dcfg, init_rng)
            self.D_local = build_discriminator(self.dcfg, init_rng) if cfg.use_local_discriminator else None
        self.provider = ToyFeatureProvider(cfg.perceptual_seed)
        self.d_params = self.D.parameters() + (self.D_local.parameters() if self.D_local else [])
        self.g_params = self.G.parameters()
        self.opt_d = Adam(self.d_params, cfg.lr0)
        self.opt_g = Adam(self.g_params, cfg.lr0)
        self.step_index = 0
        self.skipped = 0
        self.telemetry: list[dict] = []

    # one training step -----------------------------------------------------------
    def _draw(self, rng):
        cfg, sc = self.cfg, self.cfg.sampler
        ia, sa = self.domain_a[int(rng.integers(len(self.domain_a)))]
        ib, sb = self.domain_b[int(rng.integers(len(self.domain_b)))]
        flip_a, flip_b = bool(rng.integers(2)), bool(rng.integers(2))
        ia, sa = preprocess(ia, sa, sc.base_height, None, flip_a)
        ib, sb = preprocess(ib, sb, sc.base_height, None, flip_b)
        size = min(sc.global_crop, *sa.shape, *sb.shape)
        draw = sample_global_pair if cfg.sampling == "similarity" else random_crop_pair
        return draw(ia, ib, sa, sb, sa, sc, rng, size=size)

    def step(self) -> dict:
        t = self.step_index
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, t])
        lr = lr_schedule(t, self.epoch_len, cfg)
        self.opt_d.lr = self.opt_g.lr = lr
        row = {"step": t, "lr": lr}
        self.step_index += 1
        try:
            pair = self._draw(rng)
            patches = sample_local_patches(pair, cfg.sampler, rng) if self.D_local else None
        except SamplerExhausted:
            self.skipped += 1
            row.update(skipped=True)
            self.telemetry.append(row)
            return row

        dt = self.dtype
        with default_dtype(dt):
            i_a, i_b = _image(pair.i_a, dt), _image(pair.i_b, dt)
            c_a, c_b = _onehot(pair.c_a, self.n_classes, dt), _onehot(pair.c_b, self.n_classes, dt)
            z_a = _onehot(pair.z_a, self.n_classes, dt)
            m = pair.m_ab
            w = cfg.weights
            masked = cfg.mask_discriminator
            f_b = self.G(i_a, z_a)

            # discriminator update
            d_global, _ = masked_global_adv(self.D, f_b, i_b, c_a, c_b, m, which="d", masked=masked)
            d_total = d_global * w.global_adv
            r1 = None
            if w.r1 > 0:
                r1 = r1_penalty(self.D, i_b, c_b, m, w.r1, masked=masked)
                d_total = d_total + r1
            d_local = None
            if self.D_local is not None:
                d_local, _ = local_adv(self.D_local, patches, f_b, i_b, c_a, c_b, which="d")
                d_total = d_total + d_local * w.local_adv
            gd = grad(d_total, self.d_params)
            self.opt_d.step([g.data for g in gd])
            self.D.power_iteration()
            if self.D_local is not None:
                self.D_local.power_iteration()

            # generator update against the updated discriminators
            _, g_global = masked_global_adv(self.D, f_b, i_b, c_a, c_b, m, which="g", masked=masked)
            parts = {"global_adv": g_global}
            g_local = None
            if self.D_local is not None:
                _, g_local = local_adv(self.D_local, patches, f_b, i_b, c_a, c_b, which="g")
                parts["local_adv"] = g_local
            perc = perceptual_loss(self.provider, f_b, i_a) if w.perceptual > 0 else None
            parts["perceptual"] = perc
            g_total = total_g_loss(parts, w)
            gg = grad(g_total, self.g_params)
            self.opt_g.step([g.data for g in gg])
            self.G.power_iteration()

        def val(x):
            return None if x is None else float(x.item())

        row.update(
            d_global=val(d_global), d_local=val(d_local), g_global=val(g_global), g_local=val(g_local),
            perc=val(perc), r1=val(r1), draws=pair.draws,
        )
        for k in ("d_global", "d_local", "g_global", "g_local", "perc", "r1"):
            if row[k] is not None and not math.isfinite(row[k]):
                raise FloatingPointError(f"non-finite {k} at step {t}")
        self.telemetry.append(row)
        return row

    def run(self, steps: int | None = None, log_every: int = 0, logger=None) -> TrainResult:
        steps = self.cfg.steps if steps is None else steps
        tel_file = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            tel_file = open(self.out_dir / "telemetry.jsonl", "a")
        t0 = time.perf_counter()
        try:
            for _ in range(steps):
                row = self.step()
                if tel_file is not None:
                    tel_file.write(json.dumps(row, sort_keys=True) + "\n")
                if logger is not None and log_every and self.step_index % log_every == 0:
                    logger(row)
                if self.out_dir is not None and self.step_index % self.cfg.checkpoint_every == 0:
                    self.save_checkpoint(self.out_dir / f"ckpt_{self.step_index:07d}")
            if self.out_dir is not None:
                self.save_checkpoint(self.out_dir / "final")
        finally:
            if tel_file is not None:
                tel_file.close()
        return TrainResult(self.step_index, self.skipped, self.telemetry, time.perf_counter() - t0)

    # checkpoints -------------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"G.{k}": v for k, v in self.G.state_dict().items()}
        out.update({f"D.{k}": v for k, v in self.D.state_dict().items()})
        if self.D_local is not None:
            out.update({f"D_local.{k}": v for k, v in self.D_local.state_dict().items()})
        out.update({f"opt_g.{k}": v for k, v in self.opt_g.state_arrays().items()})
        out.update({f"opt_d.{k}": v for k, v in self.opt_d.state_arrays().items()})
        return out

    def save_checkpoint(self, path) -> Path:
        return save_checkpoint(path, self.state_arrays(), {
            "train": self.cfg.to_dict(),
            "generator": config_dict(self.gcfg),
            "discriminator": config_dict(self.dcfg),
            "n_classes": self.n_classes,
            "step": self.step_index,
            "skipped": self.skipped,
            "lr": lr_schedule(max(self.step_index - 1, 0), self.epoch_len, self.cfg),
        })


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    """Directory with one FTC1 file per array plus ``manifest.json``."""
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    files = {}
    for i, (name, arr) in enumerate(sorted(arrays.items())):
        fname = f"{i:05d}.ftc1"
        (path / "tensors" / fname).write_bytes(encode_ftc1(arr))
        files[name] = fname
    manifest = {**meta, "tensors": files}
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return path


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    arrays = {k: decode_ftc1((path / "tensors" / f).read_bytes()) for k, f in manifest["tensors"].items()}
    return manifest, arrays


def load_generator(path):
    """Rebuild the generator stored in a checkpoint directory."""
    manifest, arrays = load_checkpoint(path)
    gcfg = config_from_dict(GeneratorConfig, manifest["generator"])
    dtype = np.dtype(manifest["train"]["dtype"])
    with default_dtype(dtype):
        G = build_generator(gcfg, init=False)
    G.load_state_dict({k[2:]: v for k, v in arrays.items() if k.startswith("G.")})
    return G, manifest


# -- inference -------------------------------------------------------------------

def translate(G, image: np.ndarray, grid: np.ndarray, n_classes: int | None = None,
              dump_attention: bool = False):
    """Translate a full (3, H, W) image.  Sizes that are not multiples of the
    generator's stride are edge-padded and the output is cropped back.

    Returns the image, plus a ``{site: attention map}`` dict when
    ``dump_attention`` is set.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[1:] != grid.shape:
        raise ShapeMismatch(f"image {image.shape} and segmentation {grid.shape} do not match")
    d = n_classes or G.cfg.cond_channels
    dtype = G.parameters()[0].dtype
    fct = G.cfg.factor
    h, w = grid.shape
    ph, pw = (-h) % fct, (-w) % fct
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge")
        grid = np.pad(grid, ((0, ph), (0, pw)), mode="edge")
    sites = G.denorm_sites()
    for _, s in sites:
        s.record_attention = dump_attention
    try:
        with no_grad(), default_dtype(dtype):
            out = G(_image(image, dtype), _onehot(grid, d, dtype)).data[0]
    finally:
        for _, s in sites:
            s.record_attention = False
    out = out[:, :h, :w].copy()
    if not dump_attention:
        return out
    maps = {name: s.last_attention for name, s in sites if s.last_attention is not None}
    return out, maps
