"""File formats: FTC1 tensor containers and PPM/PGM images.

FTC1 layout (little-endian)::

    b"FTC1" | u8 dtype (0=f32, 1=f64, 2=u16) | u8 ndim | ndim x u32 dims | payload
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

_FTC_MAGIC = b"FTC1"
_FTC_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<u2"): 2}
_FTC_DTYPES = {v: k for k, v in _FTC_CODES.items()}


def encode_ftc1(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _FTC_CODES:
        raise FormatError(f"FTC1 cannot store dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("too many dimensions for FTC1")
    head = _FTC_MAGIC + struct.pack("<BB", _FTC_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_ftc1(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != _FTC_MAGIC:
        raise FormatError("not an FTC1 container")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in _FTC_DTYPES:
        raise FormatError(f"unknown FTC1 dtype code {code}")
    end = 6 + 4 * ndim
    if len(buf) < end:
        raise FormatError("truncated FTC1 header")
    shape = struct.unpack_from(f"<{ndim}I", buf, 6)
    dt = _FTC_DTYPES[code]
    n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(buf) - end != n * dt.itemsize:
        raise FormatError(f"FTC1 payload is {len(buf) - end} bytes, expected {n * dt.itemsize}")
    return np.frombuffer(buf, dtype=dt, offset=end).reshape(shape).astype(dt.newbyteorder("="))


def save_ftc1(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_ftc1(arr))


def load_ftc1(path) -> np.ndarray:
    return decode_ftc1(Path(path).read_bytes())


# -- netpbm ------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(buf: bytes, count: int):
    pos, tokens = 0, []
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError("truncated netpbm header")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens, pos


def _read_netpbm(buf: bytes):
    (magic, w, h, maxval), pos = _parse_header(buf, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError("bad netpbm header") from exc
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm magic {magic!r}")
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise FormatError("bad netpbm dimensions or maxval")
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * channels
    if magic in (b"P2", b"P3"):
        values = buf[pos:].split()
        if len(values) < count:
            raise FormatError("truncated netpbm data")
        data = np.array([int(v) for v in values[:count]], dtype=np.int64)
    else:
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        start = pos + 1  # single whitespace after maxval
        raw = buf[start : start + count * dt.itemsize]
        if len(raw) < count * dt.itemsize:
            raise FormatError("truncated netpbm data")
        data = np.frombuffer(raw, dtype=dt).astype(np.int64)
    if data.max(initial=0) > maxval:
        raise FormatError("sample exceeds maxval")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape), maxval


def read_ppm(path) -> np.ndarray:
    """RGB image as (3, H, W) float64 in [-1, 1]."""
    data, maxval = _read_netpbm(Path(path).read_bytes())
    if data.ndim != 3:
        raise FormatError(f"{path} is not an RGB image")
    return data.transpose(2, 0, 1) / maxval * 2.0 - 1.0


def write_ppm(path, image: np.ndarray, binary: bool = True) -> None:
    """Write a (3, H, W) image in [-1, 1] as 8-bit PPM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"expected (3, H, W), got {img.shape}")
    q = np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = q.shape[:2]
    if binary:
        Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + q.tobytes())
    else:
        rows = "\n".join(" ".join(str(v) for v in row) for row in q.reshape(h, -1))
        Path(path).write_text(f"P3\n{w} {h}\n255\n{rows}\n")


def read_pgm(path) -> np.ndarray:
    """Class-id grid (H, W) as uint16."""
    data, _ = _read_netpbm(Path(path).read_bytes())
    if data.ndim != 2:
        raise FormatError(f"{path} is not a grayscale image")
    return data.astype(np.uint16)


def write_pgm(path, grid: np.ndarray, binary: bool = True) -> None:
    g = np.asarray(grid)
    if g.ndim != 2:
        raise FormatError(f"expected (H, W), got {g.shape}")
    if g.min(initial=0) < 0 or g.max(initial=0) > 65535:
        raise FormatError("class ids must fit in 16 bits")
    maxval = 65535 if g.max(initial=0) > 255 else 255
    h, w = g.shape
    if binary:
        dt = ">u2" if maxval > 255 else "u1"
        Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + g.astype(dt).tobytes())
    else:
        rows = "\n".join(" ".join(str(int(v)) for v in row) for row in g)
        Path(path).write_text(f"P2\n{w} {h}\n{maxval}\n{rows}\n")


def list_pairs(domain_dir) -> list[tuple[Path, Path]]:
    """(image, segmentation) paths under ``domain_dir/images`` and ``domain_dir/segs``
    with matching stems, sorted by stem."""
    root = Path(domain_dir)
    images = {p.stem: p for p in (root / "images").glob("*.ppm")}
    segs = {p.stem: p for p in (root / "segs").glob("*.pgm")}
    if not images:
        raise FileNotFoundError(f"no .ppm images under {root / 'images'}")
    missing = sorted(set(images) ^ set(segs))
    if missing:
        raise FormatError(f"unmatched image/segmentation stems in {root}: {missing[:5]}")
    return [(images[k], segs[k]) for k in sorted(images)]


def load_domain(domain_dir) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(read_ppm(i), read_pgm(s)) for i, s in list_pairs(domain_dir)]


def save_domain(domain_dir, pairs, binary: bool = True) -> None:
    root = Path(domain_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "segs").mkdir(parents=True, exist_ok=True)
    for k, (img, seg) in enumerate(pairs):
        write_ppm(root / "images" / f"{k:05d}.ppm", img, binary)
        write_pgm(root / "segs" / f"{k:05d}.pgm", seg, binary)
