"""One-hot segmentations, alignment masks and the per-category class map."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IdOutOfRange, ShapeMismatch, WindowOutOfBounds

CATEGORIES = (
    "sky",
    "ground",
    "road",
    "terrain",
    "vegetation",
    "building",
    "roadside-obj.",
    "person",
    "vehicle",
    "rest",
)

# segmentation-model class id -> evaluation category; everything else is "rest"
DEFAULT_CLASS_TABLE: dict[str, tuple[int, ...]] = {
    "sky": (142,),
    "ground": (94, 95, 97, 100, 101),
    "road": (98,),
    "terrain": (102,),
    "vegetation": (174,),
    "building": (31, 32, 33, 35, 36),
    "roadside-obj.": (130, 131, 132, 133, 134, 135, 136, 137, 138, 139, 140, 141),
    "person": (125, 126, 127, 128),
    "vehicle": (175, 176, 177, 178, 180, 181, 182, 183, 185),
}


def as_grid(ids, n_classes: int | None = None) -> np.ndarray:
    """Validate a class-id grid and return it as a 2-D uint16 array."""
    grid = np.asarray(ids)
    if grid.ndim != 2 or grid.shape[0] == 0 or grid.shape[1] == 0:
        raise ShapeMismatch(f"class grid must be a non-empty 2-D array, got shape {grid.shape}")
    if grid.dtype.kind not in "ui":
        raise TypeError(f"class ids must be integers, got {grid.dtype}")
    if grid.size and (grid.min() < 0 or grid.max() > 65535):
        raise ValueError("class ids must fit in 16 bits")
    if n_classes is not None and grid.size and grid.max() >= n_classes:
        raise IdOutOfRange(int(grid.max()), n_classes)
    return grid.astype(np.uint16, copy=False)


@dataclass(frozen=True)
class OneHotSegmentation:
    """A class-id grid viewed as ``d`` binary channels.

    The channels are only built on request; mask computations work on the
    ids directly.
    """

    grid: np.ndarray
    d: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.d, *self.grid.shape)

    @property
    def channels(self) -> np.ndarray:
        return onehot_array(self.grid, self.d)


def onehot_array(grid: np.ndarray, d: int, dtype=np.float64) -> np.ndarray:
    out = np.zeros((d, *grid.shape), dtype=dtype)
    np.put_along_axis(out, grid[None].astype(np.intp), 1, axis=0)
    return out


def onehot(grid, d: int) -> OneHotSegmentation:
    g = as_grid(grid)
    if g.max() >= d:
        raise IdOutOfRange(int(g.max()), d)
    return OneHotSegmentation(g, d)


def _ids(x) -> np.ndarray:
    return x.grid if isinstance(x, OneHotSegmentation) else np.asarray(x)


def alignment_mask(ca, cb) -> np.ndarray:
    """Pixelwise max over channels of ca * cb, i.e. 1 where the labels agree.

    Accepts :class:`OneHotSegmentation` values or raw id grids; returns uint8.
    """
    if isinstance(ca, OneHotSegmentation) and isinstance(cb, OneHotSegmentation) and ca.d != cb.d:
        raise ShapeMismatch(f"channel counts differ: {ca.d} vs {cb.d}")
    a, b = _ids(ca), _ids(cb)
    if a.shape != b.shape:
        raise ShapeMismatch(f"segmentation shapes differ: {a.shape} vs {b.shape}")
    return (a == b).astype(np.uint8)


def overlap_fraction(mask: np.ndarray, window: tuple[int, int, int, int] | None = None) -> float:
    """Mean of the mask inside ``window = (y, x, h, w)`` (whole mask if None)."""
    mask = np.asarray(mask)
    if window is None:
        return float(mask.mean())
    y, x, h, w = window
    if h <= 0 or w <= 0:
        raise WindowOutOfBounds(f"empty window {window}")
    if y < 0 or x < 0 or y + h > mask.shape[0] or x + w > mask.shape[1]:
        raise WindowOutOfBounds(f"window {window} outside mask of shape {mask.shape}")
    return float(mask[y : y + h, x : x + w].mean())


def window_means(mask: np.ndarray, size: int) -> np.ndarray:
    """Mean of every ``size`` x ``size`` window, indexed by window origin."""
    sat = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    sat[1:, 1:] = np.cumsum(np.cumsum(mask, axis=0, dtype=np.int64), axis=1)
    s = size
    total = sat[s:, s:] - sat[:-s, s:] - sat[s:, :-s] + sat[:-s, :-s]
    return total / float(s * s)


@dataclass
class CkvdClassMap:
    """Total map from segmentation class id to one of the ten categories."""

    entries: dict[int, str] = field(default_factory=dict)

    @classmethod
    def default(cls) -> "CkvdClassMap":
        return cls({i: cat for cat, ids in DEFAULT_CLASS_TABLE.items() for i in ids})

    @classmethod
    def from_json(cls, path: str | Path, base: "CkvdClassMap | None" = None) -> "CkvdClassMap":
        """Override entries from ``{"<id>": "<category>"}``."""
        raw = json.loads(Path(path).read_text())
        return (base or cls.default()).with_overrides(raw)

    def with_overrides(self, raw: dict) -> "CkvdClassMap":
        entries = dict(self.entries)
        for k, v in raw.items():
            if v not in CATEGORIES:
                raise ValueError(f"unknown category {v!r} for id {k}")
            entries[int(k)] = v
        return CkvdClassMap(entries)

    def __call__(self, class_id: int) -> str:
        return self.entries.get(int(class_id), "rest")

    def category_grid(self, grid: np.ndarray) -> np.ndarray:
        """Category index (position in ``CATEGORIES``) for every pixel."""
        lut = np.full(65536, CATEGORIES.index("rest"), dtype=np.uint8)
        for i, cat in self.entries.items():
            lut[i] = CATEGORIES.index(cat)
        return lut[np.asarray(grid, dtype=np.intp)]


def map_class(class_id: int, class_map: CkvdClassMap | None = None) -> str:
    return (class_map or CkvdClassMap.default())(class_id)
