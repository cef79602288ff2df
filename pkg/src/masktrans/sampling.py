"""Preprocessing and segmentation-overlap crop sampling.

Global crop pairs are drawn by rejection: source and target window origins are
drawn independently and uniformly, and a pair is accepted when the fraction of
pixels whose labels agree is strictly above the threshold.  Local patches are
windows of the accepted pair's alignment mask that pass the same test.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff.functional import resample_array
from .errors import PartnerWiderThanImage, SamplerExhausted, ShapeMismatch
from .segmask import alignment_mask, onehot_array, window_means


@dataclass
class SamplerConfig:
    global_crop: int = 352
    local_ratio: float = 1 / 8
    threshold: float = 0.5
    max_retries: int = 100
    local_batch: int = 32
    base_height: int = 526

    def __post_init__(self):
        if not 0 <= self.threshold < 1:
            raise ValueError(f"threshold must be in [0, 1), got {self.threshold}")
        if self.global_crop * self.local_ratio < 4:
            raise ValueError("local patches must be at least 4 pixels wide")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")
        if self.local_batch < 1:
            raise ValueError("local_batch must be >= 1")

    @property
    def patch_size(self) -> int:
        return int(round(self.global_crop * self.local_ratio))


@dataclass
class CropPair:
    """Aligned source/target crops.  Conditions are class-id grids; the
    one-hot views come from :meth:`onehot`."""

    i_a: np.ndarray
    i_b: np.ndarray
    c_a: np.ndarray
    c_b: np.ndarray
    z_a: np.ndarray
    m_ab: np.ndarray
    origin_a: tuple[int, int]
    origin_b: tuple[int, int]
    draws: int = 1

    @property
    def size(self) -> int:
        return self.m_ab.shape[0]

    def onehot(self, which: str, d: int, dtype=np.float64) -> np.ndarray:
        return onehot_array(getattr(self, which), d, dtype)


@dataclass
class PatchBatch:
    patches: list[tuple[tuple[int, int, int, int], tuple[int, int, int, int]]] = field(default_factory=list)
    size: int = 0
    draws: int = 0

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def origins(self) -> np.ndarray:
        """(y, x) of each patch window, shape (P, 2)."""
        return np.array([(w[0], w[1]) for w, _ in self.patches], dtype=np.intp).reshape(-1, 2)


def preprocess(image: np.ndarray, seg: np.ndarray, base_height: int, partner_width: int | None = None,
               flip_coin: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Resize to ``base_height`` keeping aspect, center-crop to the partner
    domain's width, and optionally mirror image and segmentation together.

    ``image`` is (3, H, W) float, ``seg`` is (H, W) class ids.
    """
    if image.shape[1:] != seg.shape:
        raise ShapeMismatch(f"image {image.shape} and segmentation {seg.shape} differ")
    h, w = seg.shape
    new_w = int(round(w * base_height / h))
    if (h, w) != (base_height, new_w):
        image = resample_array(image.astype(np.float64), (base_height, new_w), "bilinear")
        seg = _resize_ids(seg, (base_height, new_w))
    if partner_width is not None:
        if new_w < partner_width:
            raise PartnerWiderThanImage(f"width {new_w} after resize is below partner width {partner_width}")
        x0 = (new_w - partner_width) // 2
        image = image[:, :, x0 : x0 + partner_width]
        seg = seg[:, x0 : x0 + partner_width]
    if flip_coin:
        image = image[:, :, ::-1]
        seg = seg[:, ::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(seg)


def _resize_ids(seg: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = seg.shape
    rows = np.minimum(np.floor(np.arange(size[0]) * (h / size[0])).astype(int), h - 1)
    cols = np.minimum(np.floor(np.arange(size[1]) * (w / size[1])).astype(int), w - 1)
    return seg[np.ix_(rows, cols)]


def crop_pair_at(Ia, Ib, Ca, Cb, Za, origin_a, origin_b, size, draws: int = 1) -> CropPair:
    ya, xa = origin_a
    yb, xb = origin_b
    sa = (slice(ya, ya + size), slice(xa, xa + size))
    sb = (slice(yb, yb + size), slice(xb, xb + size))
    c_a, c_b = Ca[sa], Cb[sb]
    return CropPair(
        i_a=Ia[(slice(None),) + sa],
        i_b=Ib[(slice(None),) + sb],
        c_a=c_a,
        c_b=c_b,
        z_a=Za[sa],
        m_ab=alignment_mask(c_a, c_b),
        origin_a=(int(ya), int(xa)),
        origin_b=(int(yb), int(xb)),
        draws=draws,
    )


def _check_inputs(Ca, Cb, size):
    for c in (Ca, Cb):
        if c.shape[0] < size or c.shape[1] < size:
            raise ShapeMismatch(f"segmentation {c.shape} smaller than crop {size}")


def _draw_origins(Ca, Cb, size, rng):
    ya, xa, yb, xb = rng.integers(
        0, [Ca.shape[0] - size + 1, Ca.shape[1] - size + 1, Cb.shape[0] - size + 1, Cb.shape[1] - size + 1]
    )
    return (int(ya), int(xa)), (int(yb), int(xb))


def sample_global_pair(Ia, Ib, Ca, Cb, Za, cfg: SamplerConfig, rng: np.random.Generator,
                       size: int | None = None) -> CropPair:
    """Rejection-sample a crop pair whose label agreement exceeds ``cfg.threshold``."""
    size = size or cfg.global_crop
    _check_inputs(Ca, Cb, size)
    for draw in range(1, cfg.max_retries + 1):
        oa, ob = _draw_origins(Ca, Cb, size, rng)
        m = Ca[oa[0] : oa[0] + size, oa[1] : oa[1] + size] == Cb[ob[0] : ob[0] + size, ob[1] : ob[1] + size]
        if m.mean() > cfg.threshold:
            return crop_pair_at(Ia, Ib, Ca, Cb, Za, oa, ob, size, draws=draw)
    raise SamplerExhausted(cfg.max_retries)


def random_crop_pair(Ia, Ib, Ca, Cb, Za, cfg: SamplerConfig, rng: np.random.Generator,
                     size: int | None = None) -> CropPair:
    """One uniform draw without the overlap test; the mask is still computed."""
    size = size or cfg.global_crop
    _check_inputs(Ca, Cb, size)
    oa, ob = _draw_origins(Ca, Cb, size, rng)
    return crop_pair_at(Ia, Ib, Ca, Cb, Za, oa, ob, size)


def sample_local_patches(pair: CropPair, cfg: SamplerConfig, rng: np.random.Generator) -> PatchBatch:
    """``cfg.local_batch`` windows (with replacement) whose mask mean exceeds the threshold.

    The same window is used in the source and target crops, since the mask
    is defined on aligned crop coordinates.
    """
    p = cfg.patch_size
    s = pair.size
    if p > s:
        raise ShapeMismatch(f"patch size {p} exceeds crop size {s}")
    valid = window_means(pair.m_ab, p) > cfg.threshold
    budget = cfg.max_retries * cfg.local_batch
    ys = rng.integers(0, s - p + 1, budget)
    xs = rng.integers(0, s - p + 1, budget)
    hits = np.flatnonzero(valid[ys, xs])
    if hits.size < cfg.local_batch:
        raise SamplerExhausted(budget, "local patch batch")
    chosen = hits[: cfg.local_batch]
    patches = [((int(ys[i]), int(xs[i]), p, p), (int(ys[i]), int(xs[i]), p, p)) for i in chosen]
    return PatchBatch(patches, p, draws=int(chosen[-1]) + 1)


def valid_origin_pairs(Ca, Cb, size: int, threshold: float) -> np.ndarray:
    """Boolean table over (ya, xa, yb, xb) of pairs passing the overlap test.

    Exhaustive; intended for small grids (statistics, tests).
    """
    ha, wa = Ca.shape[0] - size + 1, Ca.shape[1] - size + 1
    hb, wb = Cb.shape[0] - size + 1, Cb.shape[1] - size + 1
    out = np.zeros((ha, wa, hb, wb), dtype=bool)
    for ya in range(ha):
        for xa in range(wa):
            ca = Ca[ya : ya + size, xa : xa + size]
            for yb in range(hb):
                for xb in range(wb):
                    out[ya, xa, yb, xb] = (ca == Cb[yb : yb + size, xb : xb + size]).mean() > threshold
    return out


def acceptance_stats(Ca, Cb, cfg: SamplerConfig, rng: np.random.Generator, draws: int = 1000,
                     size: int | None = None, with_oracle: bool = False) -> dict:
    """Empirical single-draw acceptance rate of the overlap test."""
    size = size or cfg.global_crop
    _check_inputs(Ca, Cb, size)
    accepted = 0
    for _ in range(draws):
        oa, ob = _draw_origins(Ca, Cb, size, rng)
        m = Ca[oa[0] : oa[0] + size, oa[1] : oa[1] + size] == Cb[ob[0] : ob[0] + size, ob[1] : ob[1] + size]
        accepted += bool(m.mean() > cfg.threshold)
    stats = {"accept_rate": accepted / draws, "draws": draws}
    if with_oracle:
        stats["valid_fraction_oracle"] = float(valid_origin_pairs(Ca, Cb, size, cfg.threshold).mean())
    return stats
