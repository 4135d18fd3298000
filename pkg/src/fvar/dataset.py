"""Synthetic moving-digit videos with per-frame relevance ground truth.

Each video shows one target digit drifting one pixel per frame (with
wraparound) over a procedural texture; the label is the drift direction. One
consecutive chunk of distractor frames (a different background, black frames,
or a non-target digit jumping around) replaces part of the video and is marked
irrelevant.
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

CLASSES = ("move-up", "move-down", "move-left", "move-right")
VELOCITY = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1)}  # (dy, dx) per frame
DISTRACTOR_KINDS = ("background", "black", "foreign")
GLYPH_SIZE = 14


class DatasetFormatError(ValueError):
    pass


@dataclass
class DatasetSpec:
    train_count: int = 1800
    test_count: int = 600
    n_frames: int = 32
    image_size: int = 32
    # probability of a chunk of each kind; at most one chunk per video
    p_background: float = 1 / 3
    p_black: float = 1 / 3
    p_foreign: float = 1 / 3
    chunk_len: tuple[int, int] = (4, 12)
    target_digits: tuple[int, ...] = (0, 1, 2, 3, 4)
    background_contrast: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.chunk_len = tuple(self.chunk_len)
        self.target_digits = tuple(self.target_digits)
        self.validate()

    @property
    def chunk_probs(self) -> tuple[float, float, float]:
        return (self.p_background, self.p_black, self.p_foreign)

    def validate(self) -> None:
        if self.train_count <= 0 or self.test_count <= 0 or self.n_frames <= 0:
            raise ValueError("counts must be positive")
        if self.image_size < GLYPH_SIZE:
            raise ValueError(f"image_size must be at least {GLYPH_SIZE}")
        probs = self.chunk_probs
        if any(not 0.0 <= p <= 1.0 for p in probs) or sum(probs) > 1.0 + 1e-9:
            raise ValueError("chunk probabilities must lie in [0, 1] and sum to at most 1")
        lo, hi = self.chunk_len
        if not 1 <= lo <= hi:
            raise ValueError(f"bad chunk length range {self.chunk_len}")
        if sum(probs) > 0 and hi >= self.n_frames:
            raise ValueError(
                f"distractor chunk of up to {hi} frames leaves no relevant frame in {self.n_frames}"
            )
        if not self.target_digits or len(set(self.target_digits)) == 10:
            raise ValueError("target digits must be a non-empty proper subset of 0-9")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VideoCollection:
    frames: np.ndarray  # (videos, frames, 3, H, W) uint8
    labels: np.ndarray  # (videos,) uint8
    relevance: np.ndarray  # (videos, frames) bool
    seed: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        return (isinstance(other, VideoCollection) and self.seed == other.seed
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.relevance, other.relevance))

    def subset(self, idx) -> "VideoCollection":
        idx = np.asarray(idx)
        return VideoCollection(self.frames[idx], self.labels[idx], self.relevance[idx], self.seed)


# -- glyphs -----------------------------------------------------------------

_FONT = {  # 5x7 bitmaps, one string per row
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11110", "00001", "00001", "01110", "00001", "00001", "11110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def procedural_glyphs() -> dict[int, np.ndarray]:
    """Ten synthetic digit shapes, ``{digit: (1, 14, 14)}`` intensities in [0, 1]."""
    bank = {}
    for digit, rows in _FONT.items():
        bitmap = np.array([[c == "1" for c in r] for r in rows], dtype=np.float64)
        big = np.kron(bitmap, np.ones((2, 2)))  # 14 x 10
        glyph = np.zeros((GLYPH_SIZE, GLYPH_SIZE))
        glyph[:, 2:12] = big
        bank[digit] = glyph[None]
    return bank


def _read_idx(path, expect_magic: int, ndim: int) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 + 4 * ndim:
        raise DatasetFormatError(
            f"{path}: header needs {4 + 4 * ndim} bytes, file has {len(data)}")
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic != expect_magic:
        raise DatasetFormatError(
            f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expect_magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    start = 4 + 4 * ndim
    need = int(np.prod(dims))
    have = len(data) - start
    if have < need:
        raise DatasetFormatError(
            f"{path}: truncated payload at offset {start}: expected {need} bytes, {have} available")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=start).reshape(dims)


def load_idx_digits(images_path=None, labels_path=None) -> dict[int, np.ndarray]:
    """Digit glyphs grouped by class, from MNIST IDX files or the procedural fallback.

    IDX glyphs are 28x28 and are 2x2-averaged to 14x14 when rendered; the
    procedural bank is used when either path is missing.
    """
    if not images_path or not labels_path or not (
            os.path.exists(images_path) and os.path.exists(labels_path)):
        return procedural_glyphs()
    images = _read_idx(images_path, 0x00000803, 3)
    labels = _read_idx(labels_path, 0x00000801, 1)
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}")
    return {d: images[labels == d].astype(np.float64) / 255.0 for d in range(10)}


def _fit_glyph(glyph: np.ndarray) -> np.ndarray:
    h, w = glyph.shape
    if (h, w) == (GLYPH_SIZE, GLYPH_SIZE):
        return glyph
    if (h, w) == (2 * GLYPH_SIZE, 2 * GLYPH_SIZE):
        return glyph.reshape(GLYPH_SIZE, 2, GLYPH_SIZE, 2).mean(axis=(1, 3))
    raise ValueError(f"unsupported glyph size {glyph.shape}")


# -- rendering ----------------------------------------------------------------

def value_noise(rng: np.random.Generator, size: int, cells: int = 5) -> np.ndarray:
    """Smooth RGB texture ``(3, size, size)`` in [0, 1] from bilinear-interpolated lattice noise."""
    lattice = rng.random((3, cells + 1, cells + 1))
    pos = np.linspace(0, cells, size, endpoint=False)
    i0 = pos.astype(int)
    f = pos - i0
    f = f * f * (3 - 2 * f)
    rows = lattice[:, i0] * (1 - f)[None, :, None] + lattice[:, i0 + 1] * f[None, :, None]
    tex = rows[:, :, i0] * (1 - f) + rows[:, :, i0 + 1] * f
    return tex + 0.15 * rng.random((3, size, size))


def _canvas(glyph: np.ndarray, size: int, y: int, x: int) -> np.ndarray:
    c = np.zeros((size, size))
    c[: glyph.shape[0], : glyph.shape[1]] = glyph
    return np.roll(c, (y, x), axis=(0, 1))


def _compose(bg: np.ndarray, alpha: np.ndarray, color: np.ndarray) -> np.ndarray:
    return bg * (1 - alpha)[None] + color[:, None, None] * alpha[None]


def render_video(rng: np.random.Generator, label: int, spec: DatasetSpec,
                 glyphs: dict[int, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    n, size = spec.n_frames, spec.image_size
    foreign_digits = [d for d in range(10) if d not in spec.target_digits]

    def pick(digit_pool):
        d = int(rng.choice(digit_pool))
        bank = glyphs[d]
        return _fit_glyph(bank[rng.integers(len(bank))])

    bg = 0.6 * spec.background_contrast * value_noise(rng, size)
    glyph = pick(spec.target_digits)
    color = 0.8 + 0.2 * rng.random(3)
    y0, x0 = rng.integers(0, size, 2)
    dy, dx = VELOCITY[label]

    kind = None
    probs = np.array(spec.chunk_probs)
    u = rng.random()
    if u < probs.sum():
        kind = DISTRACTOR_KINDS[int(np.searchsorted(np.cumsum(probs), u, side="right"))]
    relevance = np.ones(n, bool)
    if kind is not None:
        length = int(rng.integers(spec.chunk_len[0], spec.chunk_len[1] + 1))
        start = int(rng.integers(0, n - length + 1))
        relevance[start : start + length] = False
    other_bg = 0.6 * spec.background_contrast * value_noise(rng, size) if kind == "background" else None
    foreign = pick(foreign_digits) if kind == "foreign" else None

    frames = np.empty((n, 3, size, size))
    for i in range(n):
        if relevance[i]:
            alpha = _canvas(glyph, size, y0 + dy * i, x0 + dx * i)
            frames[i] = _compose(bg, alpha, color)
        elif kind == "black":
            frames[i] = 0.0
        elif kind == "background":
            frames[i] = other_bg
        else:
            fy, fx = rng.integers(0, size, 2)
            frames[i] = _compose(bg, _canvas(foreign, size, fy, fx), color)
    pixels = np.clip(np.rint(frames * 255), 0, 255).astype(np.uint8)
    return pixels, relevance


def _generate_split(spec: DatasetSpec, split: int, count: int,
                    glyphs: dict[int, np.ndarray]) -> VideoCollection:
    labels = np.arange(count) % len(CLASSES)
    labels = np.random.default_rng([spec.seed, split]).permutation(labels).astype(np.uint8)
    frames = np.empty((count, spec.n_frames, 3, spec.image_size, spec.image_size), np.uint8)
    relevance = np.empty((count, spec.n_frames), bool)
    for v in range(count):
        rng = np.random.default_rng([spec.seed, split, v])
        frames[v], relevance[v] = render_video(rng, int(labels[v]), spec, glyphs)
    return VideoCollection(frames, labels, relevance, spec.seed)


def generate(spec: DatasetSpec, glyphs: dict[int, np.ndarray] | None = None):
    """Return ``(train, test)``; fully determined by ``spec`` (and the glyph bank)."""
    spec.validate()
    glyphs = glyphs or procedural_glyphs()
    return (_generate_split(spec, 0, spec.train_count, glyphs),
            _generate_split(spec, 1, spec.test_count, glyphs))


# -- file format --------------------------------------------------------------
# "FVDS" | u32 version | u32 videos | u32 frames | u32 channels | u32 height |
# u32 width | u64 seed | per video: u8 label, ceil(frames / 8) relevance bytes
# (bit i = frame i, little-endian bit order), raw pixels | u32 CRC32 of all
# preceding bytes. Integers little-endian.

DATASET_MAGIC = b"FVDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIQ")


def dataset_bytes(collection: VideoCollection) -> bytes:
    if len(collection) == 0:
        raise ValueError("refusing to write an empty collection")
    v, n, c, h, w = collection.frames.shape
    buf = bytearray(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, v, n, c, h, w, collection.seed))
    rel = np.packbits(collection.relevance, axis=1, bitorder="little")
    pix = collection.frames.reshape(v, -1)
    for i in range(v):
        buf += bytes([int(collection.labels[i])])
        buf += rel[i].tobytes()
        buf += pix[i].tobytes()
    buf += struct.pack("<I", zlib.crc32(buf))
    return bytes(buf)


def parse_dataset(data: bytes) -> VideoCollection:
    if len(data) < _HEADER.size + 4:
        raise DatasetFormatError(f"file too short: {len(data)} bytes")
    magic, version, v, n, c, h, w, seed = _HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    rel_bytes = -(-n // 8)
    record = 1 + rel_bytes + n * c * h * w
    expected = _HEADER.size + v * record + 4
    if len(data) != expected:
        raise DatasetFormatError(f"expected {expected} bytes, file has {len(data)}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise DatasetFormatError("dataset checksum mismatch")
    body = np.frombuffer(data, np.uint8, count=v * record, offset=_HEADER.size).reshape(v, record)
    labels = body[:, 0].copy()
    relevance = np.unpackbits(body[:, 1 : 1 + rel_bytes], axis=1, bitorder="little")[:, :n].astype(bool)
    frames = body[:, 1 + rel_bytes :].reshape(v, n, c, h, w).copy()
    return VideoCollection(frames, labels, relevance, seed)


def write_dataset(collection: VideoCollection, path) -> None:
    data = dataset_bytes(collection)
    with open(path, "wb") as f:
        f.write(data)


def read_dataset(path) -> VideoCollection:
    with open(path, "rb") as f:
        return parse_dataset(f.read())
