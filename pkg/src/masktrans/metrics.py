"""Kernel distances between image corpora: KID, sKVD and per-class cKVD.

All reported values are the raw squared MMD multiplied by 1000.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import TooFewSamples
from .segmask import CATEGORIES, CkvdClassMap, alignment_mask

SCALE = 1000.0
EXCLUDED_FROM_SP = ("sky", "person")

Corpus = Sequence[tuple[np.ndarray, np.ndarray]]  # (image (3,H,W), class-id grid (H,W))


def polynomial_kernel(X: np.ndarray, Y: np.ndarray, degree: int = 3, offset: float = 1.0) -> np.ndarray:
    """k(x, y) = (x.y / d + offset) ** degree."""
    return (X @ Y.T / X.shape[1] + offset) ** degree


def mmd2_unbiased(X, Y, degree: int = 3, offset: float = 1.0, estimator: str = "auto") -> float:
    """Unbiased squared MMD under the cubic polynomial kernel.

    ``estimator="paired"`` (the default when ``len(X) == len(Y)``) is the
    U-statistic over index pairs i != j, which also drops the k(x_i, y_i)
    cross terms; it is exactly zero when X and Y are the same rows.
    ``"mixed"`` keeps every cross term and allows unequal sizes.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ValueError(f"feature matrices must be (n, d) with equal d, got {X.shape} and {Y.shape}")
    n, m = len(X), len(Y)
    if n < 2 or m < 2:
        raise TooFewSamples(f"need at least 2 samples per side, got {n} and {m}")
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise ValueError("features must be finite")
    if estimator == "auto":
        estimator = "paired" if n == m else "mixed"
    kxx = polynomial_kernel(X, X, degree, offset)
    kyy = polynomial_kernel(Y, Y, degree, offset)
    kxy = polynomial_kernel(X, Y, degree, offset)
    xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    if estimator == "paired":
        if n != m:
            raise ValueError("paired estimator needs equal sample counts")
        xy = (kxy.sum() - np.trace(kxy)) / (n * (n - 1))
    elif estimator == "mixed":
        xy = kxy.mean()
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    return float(xx + yy - 2.0 * xy)


@dataclass
class MetricReport:
    name: str
    value: float | None
    raw: float | None
    n_source: int = 0
    n_target: int = 0
    per_class: dict[str, float] = field(default_factory=dict)
    absent: list[str] = field(default_factory=list)
    avg: float | None = None
    avg_sp: float | None = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _features(provider, crops: list[np.ndarray], batch: int = 256) -> np.ndarray:
    out = []
    for k in range(0, len(crops), batch):
        out.append(provider.vectors(np.stack(crops[k : k + batch])))
    return np.concatenate(out, axis=0)


def kid(source: Sequence[np.ndarray], target: Sequence[np.ndarray], provider) -> MetricReport:
    """Whole-image kernel distance (mixed estimator, sizes may differ)."""
    X = _features(provider, [np.asarray(i, dtype=np.float64) for i in source])
    Y = _features(provider, [np.asarray(i, dtype=np.float64) for i in target])
    raw = mmd2_unbiased(X, Y, estimator="mixed")
    return MetricReport("kid", raw * SCALE, raw, len(X), len(Y), config={"provider": provider.name})


def _window(shape, size, rng):
    y = int(rng.integers(0, shape[0] - size + 1))
    x = int(rng.integers(0, shape[1] - size + 1))
    return y, x


def sample_crop_pairs(source: Corpus, target: Corpus, size: int, threshold: float, n_pairs: int,
                      seed: int, max_retries: int = 100,
                      keep: Callable[[np.ndarray, np.ndarray], bool] | None = None):
    """Segmentation-matched crop pairs for sKVD.

    Source and target draws come from two generators seeded identically, so
    two identical corpora give identical crop sets.  A pair is kept when its
    label agreement is strictly above ``threshold`` and ``keep`` (if given)
    accepts both segmentation crops.
    """
    rs = np.random.default_rng(seed)
    rt = np.random.default_rng(seed)
    xs, ys = [], []
    for _ in range(n_pairs * max_retries):
        if len(xs) == n_pairs:
            break
        ia, sa = source[int(rs.integers(len(source)))]
        ib, sb = target[int(rt.integers(len(target)))]
        if min(sa.shape) < size or min(sb.shape) < size:
            raise ValueError(f"crop size {size} exceeds an image of shape {sa.shape} or {sb.shape}")
        ya, xa = _window(sa.shape, size, rs)
        yb, xb = _window(sb.shape, size, rt)
        ca = sa[ya : ya + size, xa : xa + size]
        cb = sb[yb : yb + size, xb : xb + size]
        if alignment_mask(ca, cb).mean() <= threshold:
            continue
        if keep is not None and not (keep(ca) and keep(cb)):
            continue
        xs.append(np.asarray(ia[:, ya : ya + size, xa : xa + size], dtype=np.float64))
        ys.append(np.asarray(ib[:, yb : yb + size, xb : xb + size], dtype=np.float64))
    return xs, ys


def crop_size_for(corpus: Corpus, crop_ratio: float) -> int:
    """Square crop side: ``crop_ratio`` of the (smallest) image height, at least 1."""
    h = min(seg.shape[0] for _, seg in corpus)
    return max(1, int(round(h * crop_ratio)))


def skvd(source: Corpus, target: Corpus, provider, crop_ratio: float = 1 / 8, threshold: float = 0.5,
         n_pairs: int = 64, seed: int = 0, max_retries: int = 100, keep=None,
         name: str = "skvd") -> MetricReport:
    if not source or not target:
        raise TooFewSamples("empty corpus")
    size = crop_size_for(list(source) + list(target), crop_ratio)
    xs, ys = sample_crop_pairs(source, target, size, threshold, n_pairs, seed, max_retries, keep)
    if len(xs) < 2:
        raise TooFewSamples(f"only {len(xs)} crop pairs passed the overlap test")
    raw = mmd2_unbiased(_features(provider, xs), _features(provider, ys))
    cfg = {"crop_ratio": crop_ratio, "crop_size": size, "threshold": threshold, "n_pairs": n_pairs,
           "seed": seed, "kernel": {"degree": 3, "offset": 1.0, "scale": "1/d"}, "provider": provider.name}
    return MetricReport(name, raw * SCALE, raw, len(xs), len(ys), config=cfg)


def erase_other_categories(corpus: Corpus, category: str, class_map: CkvdClassMap):
    """Zero every pixel not in ``category``; the segmentation becomes a
    binary grid (1 inside the category)."""
    idx = CATEGORIES.index(category)
    out = []
    for img, seg in corpus:
        inside = class_map.category_grid(seg) == idx
        out.append((np.where(inside[None], img, 0.0), inside.astype(np.uint16)))
    return out


def class_fraction_filter(pixel_threshold: float):
    def keep(seg_crop: np.ndarray) -> bool:
        return float(np.mean(seg_crop == 1)) > pixel_threshold

    return keep


def ckvd(source: Corpus, target: Corpus, provider, class_map: CkvdClassMap | None = None,
         pixel_threshold: float = 0.05, crop_ratio: float = 1 / 8, threshold: float = 0.5,
         n_pairs: int = 64, seed: int = 0, max_retries: int = 100,
         categories: Sequence[str] = CATEGORIES) -> MetricReport:
    """Per-category sKVD after erasing all other categories.

    A category with fewer than two usable crop pairs is reported as absent
    and left out of both averages.
    """
    class_map = class_map or CkvdClassMap.default()
    keep = class_fraction_filter(pixel_threshold)
    per_class, absent = {}, []
    for cat in categories:
        src = erase_other_categories(source, cat, class_map)
        tgt = erase_other_categories(target, cat, class_map)
        try:
            rep = skvd(src, tgt, provider, crop_ratio, threshold, n_pairs, seed, max_retries, keep)
        except TooFewSamples:
            absent.append(cat)
            continue
        per_class[cat] = rep.value
    avg = float(np.mean(list(per_class.values()))) if per_class else None
    sp = [v for k, v in per_class.items() if k not in EXCLUDED_FROM_SP]
    avg_sp = float(np.mean(sp)) if sp else None
    cfg = {"crop_ratio": crop_ratio, "threshold": threshold, "pixel_threshold": pixel_threshold,
           "n_pairs": n_pairs, "seed": seed, "kernel": {"degree": 3, "offset": 1.0, "scale": "1/d"},
           "provider": provider.name}
    return MetricReport("ckvd", avg, None if avg is None else avg / SCALE, len(source), len(target),
                        per_class, absent, avg, avg_sp, cfg)
