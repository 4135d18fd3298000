"""Sign signatures of activation maps and Hamming distances between them.

A signature stores bit ``i = (value_i > 0)`` packed little-endian into 64-bit
words: bit ``i`` lives in word ``i // 64`` at position ``i % 64``. Pad bits in
the last word are always zero, so XOR + popcount over whole words is exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

WORD_BITS = 64

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)


def popcount64_swar(words: np.ndarray) -> np.ndarray:
    """Per-word popcount with the classic SWAR reduction (no hardware popcount)."""
    v = words.astype(np.uint64, copy=True)
    v -= (v >> np.uint64(1)) & _M1
    v = (v & _M2) + ((v >> np.uint64(2)) & _M2)
    v = (v + (v >> np.uint64(4))) & _M4
    return (v * _H01) >> np.uint64(56)


if hasattr(np, "bitwise_count"):
    def popcount64(words: np.ndarray) -> np.ndarray:
        return np.bitwise_count(words)
else:  # numpy < 2.0
    popcount64 = popcount64_swar


@dataclass(frozen=True)
class Signature:
    words: np.ndarray
    bit_len: int

    def __post_init__(self):
        if self.bit_len <= 0:
            raise ValueError("signature must have at least one bit")
        if self.words.dtype != np.uint64 or self.words.shape != (n_words(self.bit_len),):
            raise ValueError("signature words must be uint64 of length ceil(bit_len / 64)")

    def bits(self) -> np.ndarray:
        """Unpacked 0/1 vector of length ``bit_len``."""
        raw = self.words.astype("<u8").view(np.uint8)
        return np.unpackbits(raw, bitorder="little")[: self.bit_len]


def n_words(bit_len: int) -> int:
    return -(-bit_len // WORD_BITS)


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack rows of a boolean array ``(..., bit_len)`` into zero-padded uint64 words."""
    bits = np.asarray(bits, dtype=bool)
    bit_len = bits.shape[-1]
    pad = n_words(bit_len) * WORD_BITS - bit_len
    if pad:
        bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (pad,), bool)], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)


def binarize(activation: np.ndarray) -> Signature:
    """Signature of one activation map (any shape; flattened in C order)."""
    flat = np.asarray(activation).reshape(-1)
    if not np.all(np.isfinite(flat)):
        raise ValueError("cannot binarize non-finite activations")
    return Signature(pack_bits(flat > 0), flat.size)


def binarize_frames(activations: np.ndarray) -> np.ndarray:
    """Packed words for every frame of ``(frames, ...)``; shape ``(frames, n_words)``."""
    flat = activations.reshape(activations.shape[0], -1)
    if not np.all(np.isfinite(flat)):
        raise ValueError("cannot binarize non-finite activations")
    return pack_bits(flat > 0)


def hamming(a: Signature, b: Signature) -> int:
    if a.bit_len != b.bit_len:
        raise ValueError(f"signature length mismatch: {a.bit_len} vs {b.bit_len}")
    return int(popcount64(a.words ^ b.words).sum())


def adjacent_hamming(words: np.ndarray) -> np.ndarray:
    """Distances between consecutive rows of packed signatures, ``(frames - 1,)``."""
    if len(words) < 2:
        return np.zeros(0, dtype=np.int64)
    return popcount64(words[1:] ^ words[:-1]).sum(axis=1).astype(np.int64)


def hamming_naive(a: Signature, b: Signature) -> int:
    """Reference per-bit loop."""
    if a.bit_len != b.bit_len:
        raise ValueError(f"signature length mismatch: {a.bit_len} vs {b.bit_len}")
    count = 0
    for i in range(a.bit_len):
        w, k = divmod(i, WORD_BITS)
        if ((int(a.words[w]) >> k) & 1) != ((int(b.words[w]) >> k) & 1):
            count += 1
    return count


# Signature dumps: "FVSG" | u32 bit_len | u32 frame count | frames x words u64, all LE.
DUMP_MAGIC = b"FVSG"


def write_signature_dump(path, words: np.ndarray, bit_len: int) -> None:
    words = np.asarray(words, dtype=np.uint64)
    if words.ndim != 2 or words.shape[1] != n_words(bit_len):
        raise ValueError("words must be (frames, ceil(bit_len / 64))")
    with open(path, "wb") as f:
        f.write(DUMP_MAGIC + struct.pack("<II", bit_len, words.shape[0]))
        f.write(words.astype("<u8").tobytes())


def read_signature_dump(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != DUMP_MAGIC:
        raise ValueError("not a signature dump (bad magic)")
    bit_len, frames = struct.unpack_from("<II", data, 4)
    expected = 12 + frames * n_words(bit_len) * 8
    if len(data) != expected:
        raise ValueError(f"signature dump: expected {expected} bytes, got {len(data)}")
    words = np.frombuffer(data, dtype="<u8", offset=12).astype(np.uint64)
    return words.reshape(frames, n_words(bit_len)), bit_len


@dataclass
class BlockConsistency:
    distances: dict[str, np.ndarray]
    spearman: float | None

    @property
    def degenerate(self) -> bool:
        return self.spearman is None


def _spearman(a: np.ndarray, b: np.ndarray) -> float | None:
    if len(a) < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return None
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)


def signature_block_consistency(block_activations: dict[str, np.ndarray]) -> BlockConsistency:
    """Adjacent-frame distances per block and the rank correlation of the first two.

    ``block_activations`` maps block name to pre-activation outputs ``(frames, ...)``.
    """
    if len(block_activations) < 2:
        raise ValueError("need activations from at least two blocks")
    distances = {name: adjacent_hamming(binarize_frames(acts))
                 for name, acts in block_activations.items()}
    first, second = list(distances.values())[:2]
    return BlockConsistency(distances, _spearman(first, second))
