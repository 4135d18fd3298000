import struct

import numpy as np
import pytest

from fvar import dataset as ds

SMALL = dict(train_count=40, test_count=12, seed=3)


@pytest.fixture(scope="module")
def small():
    return ds.generate(ds.DatasetSpec(**SMALL))


def test_shapes_and_determinism(small):
    train, test = small
    assert train.frames.shape == (40, 32, 3, 32, 32) and train.frames.dtype == np.uint8
    assert test.frames.shape == (12, 32, 3, 32, 32)
    again = ds.generate(ds.DatasetSpec(**SMALL))
    assert ds.dataset_bytes(train) == ds.dataset_bytes(again[0])
    assert ds.dataset_bytes(test) == ds.dataset_bytes(again[1])
    other = ds.generate(ds.DatasetSpec(**{**SMALL, "seed": 4}))[0]
    assert not np.array_equal(other.frames, train.frames)


def test_label_balance(small):
    for split in small:
        counts = np.bincount(split.labels, minlength=4)
        assert np.all(np.abs(counts - len(split) / 4) <= 1)


def test_every_video_has_relevant_frames(small):
    for split in small:
        assert np.all(split.relevance.any(axis=1))
        assert split.labels.max() < 4


def test_default_spec_counts():
    spec = ds.DatasetSpec()
    assert (spec.train_count, spec.test_count, spec.n_frames) == (1800, 600, 32)


def test_zero_distractor_probability_all_relevant():
    train, _ = ds.generate(ds.DatasetSpec(train_count=8, test_count=4, p_background=0,
                                          p_black=0, p_foreign=0))
    assert train.relevance.all()


@pytest.mark.parametrize("kind", ["p_background", "p_black", "p_foreign"])
def test_distractor_chunk_is_one_consecutive_run(kind):
    probs = {"p_background": 0.0, "p_black": 0.0, "p_foreign": 0.0, kind: 1.0}
    train, _ = ds.generate(ds.DatasetSpec(train_count=30, test_count=4, **probs))
    for rel in train.relevance:
        off = np.flatnonzero(~rel)
        assert 4 <= len(off) <= 12
        assert np.all(np.diff(off) == 1)
    if kind == "p_black":
        frames = train.frames[~train.relevance]
        assert frames.max() == 0


def test_impossible_chunk_rejected():
    with pytest.raises(ValueError):
        ds.DatasetSpec(n_frames=10, chunk_len=(4, 10))
    with pytest.raises(ValueError):
        ds.DatasetSpec(p_black=1.5)
    with pytest.raises(ValueError):
        ds.DatasetSpec(train_count=0)
    ds.DatasetSpec(n_frames=10, chunk_len=(4, 10), p_background=0, p_black=0, p_foreign=0)


def _circular_shift(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    """Displacement (dy, dx) maximizing the circular cross-correlation of b against a."""
    corr = np.fft.ifft2(np.conj(np.fft.fft2(a)) * np.fft.fft2(b)).real
    dy, dx = np.unravel_index(np.argmax(corr), corr.shape)
    n = a.shape[0]
    return (dy + n // 2) % n - n // 2, (dx + n // 2) % n - n // 2


def test_relevant_frames_move_along_label_direction():
    spec = ds.DatasetSpec(train_count=24, test_count=4, background_contrast=0.0)
    train, _ = ds.generate(spec)
    for v in range(len(train)):
        vel = ds.VELOCITY[int(train.labels[v])]
        rel = np.flatnonzero(train.relevance[v])
        for i, j in zip(rel[:-1], rel[1:]):
            if j != i + 1:
                continue
            a = train.frames[v, i].astype(float).sum(axis=0)
            b = train.frames[v, j].astype(float).sum(axis=0)
            assert _circular_shift(a, b) == vel


def _write_idx(path, magic, dims, payload: bytes):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload)


def test_idx_full_size_file(tmp_path):
    n = 60000
    imgs = np.zeros((n, 28, 28), np.uint8)
    imgs[:, 10:18, 10:18] = 200
    labels = (np.arange(n) % 10).astype(np.uint8)
    _write_idx(tmp_path / "i", 0x803, (n, 28, 28), imgs.tobytes())
    _write_idx(tmp_path / "l", 0x801, (n,), labels.tobytes())
    # independent header read
    with open(tmp_path / "i", "rb") as f:
        header = struct.unpack(">IIII", f.read(16))
    assert header == (0x803, 60000, 28, 28)
    bank = ds.load_idx_digits(tmp_path / "i", tmp_path / "l")
    assert sum(len(v) for v in bank.values()) == 60000
    assert bank[3].shape == (6000, 28, 28)
    train, _ = ds.generate(ds.DatasetSpec(train_count=4, test_count=4), bank)
    assert train.frames.shape[0] == 4


def test_idx_errors(tmp_path):
    _write_idx(tmp_path / "bad", 0x999, (2, 28, 28), bytes(2 * 784))
    _write_idx(tmp_path / "l", 0x801, (2,), bytes(2))
    with pytest.raises(ds.DatasetFormatError, match="magic"):
        ds.load_idx_digits(tmp_path / "bad", tmp_path / "l")
    _write_idx(tmp_path / "short", 0x803, (2, 28, 28), bytes(1000))
    with pytest.raises(ds.DatasetFormatError, match="expected 1568 bytes, 1000 available"):
        ds.load_idx_digits(tmp_path / "short", tmp_path / "l")
    _write_idx(tmp_path / "three", 0x803, (3, 28, 28), bytes(3 * 784))
    with pytest.raises(ds.DatasetFormatError, match="does not match"):
        ds.load_idx_digits(tmp_path / "three", tmp_path / "l")


def test_missing_idx_falls_back_to_procedural(tmp_path):
    bank = ds.load_idx_digits(tmp_path / "nope", tmp_path / "nope2")
    assert sorted(bank) == list(range(10))
    shapes = {g.shape for glyphs in bank.values() for g in glyphs}
    assert shapes == {(ds.GLYPH_SIZE, ds.GLYPH_SIZE)}
    flat = [bank[d][0].ravel() for d in range(10)]
    assert len({f.tobytes() for f in flat}) == 10


def test_format_roundtrip(tmp_path, small):
    train, _ = small
    path = tmp_path / "t.fvds"
    ds.write_dataset(train, path)
    back = ds.read_dataset(path)
    assert back == train
    assert ds.dataset_bytes(back) == path.read_bytes()


def test_format_rejects_corruption(small):
    data = bytearray(ds.dataset_bytes(small[1]))
    for pos in (5, 40, len(data) // 2, len(data) - 1):
        bad = bytearray(data)
        bad[pos] ^= 1
        with pytest.raises(ds.DatasetFormatError):
            ds.parse_dataset(bytes(bad))
    with pytest.raises(ds.DatasetFormatError):
        ds.parse_dataset(bytes(data[:-1]))


def test_format_rejects_version_and_empty(small):
    import zlib

    data = bytearray(ds.dataset_bytes(small[1]))
    struct.pack_into("<I", data, 4, 2)
    body = bytes(data[:-4])
    with pytest.raises(ds.DatasetFormatError, match="version"):
        ds.parse_dataset(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(ValueError):
        ds.dataset_bytes(small[1].subset(np.arange(0)))
