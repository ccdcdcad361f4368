"""Synthetic shape datasets, PGM/PPM ingestion and the FXT tensor file format.

FXT layout (all integers little-endian)::

    magic   4 bytes  b"FXT1"
    count   uint32   number of tensors
    per tensor:
      name_len  uint32, then name_len bytes of UTF-8
      dtype     uint8   0 = float32, 1 = float64
      rank      uint8
      dims      rank x uint32
      payload   prod(dims) little-endian values, row-major
"""

from __future__ import annotations

import dataclasses
import os
import struct
from collections.abc import Iterable, Mapping

import numpy as np

from .seeding import DATA, make_rng

SHAPES = ("circle", "square", "triangle", "cross")
STYLES = ("filled", "outline")
NUM_CLASSES = len(SHAPES) * len(STYLES)

FXT_MAGIC = b"FXT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_MAX_DIM = 2**32 - 1


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


@dataclasses.dataclass(frozen=True, eq=False)
class ShapeDataset:
    images: np.ndarray  # (n, side, side, c), generated in [0, 1]
    labels: np.ndarray  # (n,) int64

    @property
    def side(self) -> int:
        return self.images.shape[1]

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ShapeDataset":
        return ShapeDataset(self.images[idx], self.labels[idx])

    def value_range(self, lo: float = -1.0, hi: float = 1.0) -> "ShapeDataset":
        """Affinely map pixel values from ``[0, 1]`` to ``[lo, hi]``."""
        if not hi > lo:
            raise ValueError(f"empty value range [{lo}, {hi}]")
        return ShapeDataset(self.images * (hi - lo) + lo, self.labels)


def class_name(label: int) -> str:
    return f"{SHAPES[label // 2]}-{STYLES[label % 2]}"


def _shape_mask(kind: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if kind == "circle":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
    if kind == "triangle":
        # apex up, base at dy = 0.7 r
        return (dy <= 0.7 * r) & (np.abs(dx) * 1.6 <= dy + r)
    arm = r / 3.0
    return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))


def _erode(mask: np.ndarray, steps: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(steps):
        padded = np.pad(out, 1, constant_values=False)
        out = out & padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return out


def render_shape(rng: np.random.Generator, label: int, side: int, channels: int = 1) -> np.ndarray:
    kind = SHAPES[label // 2]
    outline = STYLES[label % 2] == "outline"
    r = rng.uniform(0.2 * side, 0.36 * side)
    cx = rng.uniform(r + 1, side - r - 1)
    cy = rng.uniform(r + 1, side - r - 1)
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    dx, dy = xx - cx, yy - cy
    mask = _shape_mask(kind, dx, dy, r)
    if outline:
        mask &= ~_erode(mask, int(rng.integers(2, 4)))
    fg = rng.uniform(0.6, 1.0, size=channels) if channels > 1 else np.array([rng.uniform(0.6, 1.0)])
    noise = rng.normal(0.15, 0.06, size=(side, side, channels))
    image = np.where(mask[..., None], fg, noise)
    return np.clip(image, 0.0, 1.0)


def gen_shapes(seed: int, n: int, side: int = 48, channels: int = 1) -> ShapeDataset:
    """Generate ``n`` labelled shape images deterministically from ``seed``.

    Each image is drawn from its own ``(seed, index)`` stream. The label is
    uniform over the 8 classes (4 shapes x filled/outline).
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if side < 16:
        raise ValueError(f"side must be >= 16, got {side}")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    images = np.empty((n, side, side, channels))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = make_rng(seed, DATA, i)
        labels[i] = rng.integers(NUM_CLASSES)
        images[i] = render_shape(rng, int(labels[i]), side, channels)
    return ShapeDataset(images, labels)


def _read_header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("malformed PNM header: unexpected end of file")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("malformed PNM header: missing separator before payload")
    return tokens, pos + 1


def load_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) with maxval 255 as ``(h, w, c)`` floats in [0, 1]."""
    with open(path, "rb") as f:
        buf = f.read()
    tokens, offset = _read_header_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r}; expected P5 or P6")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as e:
        raise FormatError(f"malformed PNM header: {e}") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid PNM size {width}x{height}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; only 255 is supported")
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    payload = buf[offset:]
    if len(payload) < expected:
        raise FormatError(f"truncated PNM payload: expected {expected} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload[:expected], dtype=np.uint8).reshape(height, width, channels)
    return pixels.astype(np.float64) / 255.0


def save_pnm(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    if c not in (1, 3):
        raise ValueError("image must have 1 or 3 channels")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5" if c == 1 else b"P6")
        f.write(f"\n{w} {h}\n255\n".encode())
        f.write(pixels.tobytes())


def fxt_write(path: str | os.PathLike, tensors: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> None:
    """Write named float32/float64 tensors; order of ``tensors`` is preserved."""
    items = list(tensors.items() if isinstance(tensors, Mapping) else tensors)
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        raise ValueError(f"duplicate tensor name {dup!r}")
    parts = [FXT_MAGIC, struct.pack("<I", len(items))]
    for name, value in items:
        if hasattr(value, "detach"):
            value = value.detach().cpu().numpy()
        arr = np.asarray(value)
        if arr.dtype not in _CODES:
            raise TypeError(f"tensor {name!r} has unsupported dtype {arr.dtype}; use float32 or float64")
        if arr.ndim > 255:
            raise ValueError(f"tensor {name!r} rank {arr.ndim} exceeds 255")
        if any(d > _MAX_DIM for d in arr.shape):
            raise OverflowError(f"tensor {name!r} has a dimension larger than {_MAX_DIM}")
        code = _CODES[arr.dtype]
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def fxt_read(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()

    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated FXT file at byte {pos}: need {n} more bytes")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    magic = take(4)
    if magic != FXT_MAGIC:
        if magic[:3] == b"FXT":
            raise FormatError(f"unsupported FXT version {magic!r}; expected {FXT_MAGIC!r}")
        raise FormatError(f"not an FXT file (magic {magic!r})")
    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for tensor {name!r}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        out[name] = np.frombuffer(take(nbytes), dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor")
    return out


def save_dataset(path: str | os.PathLike, ds: ShapeDataset) -> None:
    fxt_write(path, {"images": ds.images.astype(np.float64), "labels": ds.labels.astype(np.float64)})


def load_dataset(path: str | os.PathLike) -> ShapeDataset:
    t = fxt_read(path)
    return ShapeDataset(np.asarray(t["images"], dtype=np.float64), t["labels"].astype(np.int64))
