import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fvar import signatures as sg
from fvar.model import PipelineConfig, block_consistency, build_network


def sig_from_bits(bits) -> sg.Signature:
    bits = np.asarray(bits, dtype=bool)
    return sg.Signature(sg.pack_bits(bits), bits.size)


def test_binarize_at_zero_rule():
    s = sg.binarize(np.array([-0.5, 0.0, 3.2, -7]))
    assert s.bits().tolist() == [0, 0, 1, 0]


def test_all_positive_map_has_zero_padding():
    s = sg.binarize(np.ones(70))
    assert s.bits().sum() == 70
    assert int(s.words[1]) == (1 << 6) - 1  # only 6 semantic bits in the second word


def test_binarize_matches_scalar_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 5, 7))
    a[0, 0, :3] = 0.0
    s = sg.binarize(a)
    oracle = [1 if v > 0 else 0 for v in a.reshape(-1)]
    assert s.bits().tolist() == oracle


def test_binarize_rejects_non_finite():
    with pytest.raises(ValueError):
        sg.binarize(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        sg.binarize_frames(np.array([[np.inf]]))


def test_signature_invariants_enforced():
    with pytest.raises(ValueError):
        sg.Signature(np.zeros(1, np.uint64), 0)
    with pytest.raises(ValueError):
        sg.Signature(np.zeros(2, np.uint64), 64)


def test_hamming_complement_example():
    assert sg.hamming(sig_from_bits([1, 0, 1, 1, 0]), sig_from_bits([0, 1, 0, 0, 1])) == 5


def test_hamming_length_mismatch():
    with pytest.raises(ValueError):
        sg.hamming(sig_from_bits([1, 0]), sig_from_bits([1, 0, 1]))


def test_swar_popcount_matches_builtin():
    words = np.random.default_rng(1).integers(0, 2**63, size=1000, dtype=np.uint64) * np.uint64(2)
    words[:3] = [0, np.iinfo(np.uint64).max, 1]
    expected = [bin(int(w)).count("1") for w in words]
    assert sg.popcount64_swar(words).tolist() == expected
    assert sg.popcount64(words).tolist() == expected


def test_hamming_equals_naive_on_random_pairs():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(1, 10_000))
        a = sig_from_bits(rng.random(n) < 0.5)
        b = sig_from_bits(rng.random(n) < rng.random())
        assert sg.hamming(a, b) == sg.hamming_naive(a, b)


bit_vectors = st.integers(1, 300).flatmap(
    lambda n: st.tuples(*[st.lists(st.booleans(), min_size=n, max_size=n)] * 3))


@settings(max_examples=200, deadline=None)
@given(bit_vectors)
def test_hamming_is_a_metric(triple):
    a, b, c = (sig_from_bits(v) for v in triple)
    assert sg.hamming(a, a) == 0
    assert sg.hamming(a, b) == sg.hamming(b, a)
    assert sg.hamming(a, c) <= sg.hamming(a, b) + sg.hamming(b, c)
    assert sg.hamming(a, b) == int(np.sum(np.array(triple[0]) != np.array(triple[1])))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.data())
def test_flipping_k_signs_changes_distance_by_k(n, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    act = rng.standard_normal(n)
    act[act == 0] = 1.0
    k = data.draw(st.integers(0, n))
    flipped = act.copy()
    idx = rng.choice(n, size=k, replace=False)
    flipped[idx] = -flipped[idx]
    assert sg.hamming(sg.binarize(act), sg.binarize(flipped)) == k


def test_adjacent_hamming_matches_pairwise():
    rng = np.random.default_rng(3)
    acts = rng.standard_normal((6, 4, 5, 5))
    words = sg.binarize_frames(acts)
    ref = [sg.hamming(sg.binarize(acts[i]), sg.binarize(acts[i + 1])) for i in range(5)]
    assert sg.adjacent_hamming(words).tolist() == ref
    assert sg.adjacent_hamming(words[:1]).size == 0


def test_signature_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    words = sg.binarize_frames(rng.standard_normal((5, 130)))
    path = tmp_path / "s.fvsg"
    sg.write_signature_dump(path, words, 130)
    back, bit_len = sg.read_signature_dump(path)
    assert bit_len == 130 and np.array_equal(back, words)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        sg.read_signature_dump(path)


def test_block_consistency_identical_frames_is_degenerate():
    acts = np.ones((4, 2, 3, 3))
    rep = sg.signature_block_consistency({"a": acts, "b": -acts})
    assert rep.degenerate
    assert all(np.all(d == 0) for d in rep.distances.values())


def test_block_consistency_outlier_frame_dominates():
    cfg = PipelineConfig(image_size=16, channels=(8, 16))
    net = build_network(cfg, seed=0).astype(np.float64)
    rng = np.random.default_rng(5)
    base = rng.standard_normal((3, 16, 16))
    frames = np.stack([base] * 8)
    frames[4] = rng.standard_normal((3, 16, 16))
    rep = block_consistency(net, frames)
    assert set(rep.distances) == {"conv1", "conv2"}
    for d in rep.distances.values():
        # pairs (3,4) and (4,5) touch the outlier; all others compare duplicates
        assert d[3] > 0 and d[4] > 0
        assert np.all(np.delete(d, [3, 4]) == 0)


def test_block_consistency_needs_two_blocks():
    with pytest.raises(ValueError):
        sg.signature_block_consistency({"a": np.ones((2, 3))})
