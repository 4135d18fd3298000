"""Temporally contiguous clustering of frames from adjacent-frame distances."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .signatures import Signature, adjacent_hamming

METHODS = ("cumulative", "slope", "uniform")


@dataclass(frozen=True)
class CumulativeProfile:
    """``d[i]`` is the distance between frames ``i`` and ``i + 1``; ``C[i] = sum(d[:i])``."""

    d: np.ndarray
    C: np.ndarray

    @classmethod
    def from_distances(cls, d) -> "CumulativeProfile":
        d = np.asarray(d, dtype=np.int64)
        if d.ndim != 1 or np.any(d < 0):
            raise ValueError("distances must be a 1-D sequence of non-negative integers")
        return cls(d, np.concatenate([[0], np.cumsum(d)]).astype(np.int64))

    @property
    def n_frames(self) -> int:
        return len(self.C)

    @property
    def total(self) -> int:
        return int(self.C[-1])


@dataclass(frozen=True)
class ClusterAssignment:
    ids: np.ndarray
    g: int

    def __post_init__(self):
        ids = self.ids
        if len(ids) == 0 or ids[0] != 1 or np.any(np.diff(ids) < 0) or ids.max() > self.g:
            raise ValueError(f"invalid assignment {ids.tolist()} for g={self.g}")

    @property
    def boundaries(self) -> list[int]:
        """Frame indices (0-based) at which the cluster id increments."""
        return (np.flatnonzero(np.diff(self.ids)) + 1).tolist()

    @property
    def sizes(self) -> list[int]:
        """Sizes of the non-empty clusters in temporal order."""
        return np.diff([0, *self.boundaries, len(self.ids)]).tolist()

    @property
    def n_clusters(self) -> int:
        return len(self.boundaries) + 1

    def groups(self) -> list[tuple[int, int]]:
        """Half-open ``(start, stop)`` frame ranges of the non-empty clusters."""
        edges = [0, *self.boundaries, len(self.ids)]
        return list(zip(edges[:-1], edges[1:]))


def cumulative_profile(signatures: list[Signature] | np.ndarray) -> CumulativeProfile:
    """Profile from ordered signatures (a list, or packed words ``(frames, n_words)``)."""
    if len(signatures) == 0:
        raise ValueError("need at least one signature")
    if isinstance(signatures, np.ndarray):
        words = signatures
    else:
        lengths = {s.bit_len for s in signatures}
        if len(lengths) != 1:
            raise ValueError(f"signatures have different bit lengths: {sorted(lengths)}")
        words = np.stack([s.words for s in signatures])
    return CumulativeProfile.from_distances(adjacent_hamming(words))


def _check_g(g: int) -> None:
    if g < 1:
        raise ValueError(f"cluster count must be >= 1, got {g}")


def cumulative_cluster(profile: CumulativeProfile, g: int) -> ClusterAssignment:
    """Cluster id ``max(1, ceil(g * C_i / C_N))``; everything in one cluster when C_N = 0."""
    _check_g(g)
    total = profile.total
    if total == 0:
        return ClusterAssignment(np.ones(profile.n_frames, np.int64), g)
    ids = -((-g * profile.C) // total)  # exact integer ceiling
    return ClusterAssignment(np.maximum(ids, 1).astype(np.int64), g)


def slope_cluster(profile: CumulativeProfile, g: int) -> ClusterAssignment:
    """Cut after the frames with the ``g - 1`` largest positive adjacent distances.

    Equal distances are ranked by frame index, earliest first.
    """
    _check_g(g)
    d = profile.d
    order = np.lexsort((np.arange(len(d)), -d))
    cuts = [i for i in order[: g - 1] if d[i] > 0]
    ids = np.ones(profile.n_frames, np.int64)
    for i in cuts:
        ids[i + 1 :] += 1
    return ClusterAssignment(ids, g)


def uniform_cluster(n_frames: int, g: int) -> ClusterAssignment:
    """Balanced contiguous split; earlier clusters take the extra frame."""
    _check_g(g)
    if n_frames < 1:
        raise ValueError("need at least one frame")
    k = min(g, n_frames)
    base, extra = divmod(n_frames, k)
    sizes = [base + 1] * extra + [base] * (k - extra)
    return ClusterAssignment(np.repeat(np.arange(1, k + 1), sizes).astype(np.int64), g)


def assign(method: str, profile: CumulativeProfile, g: int) -> ClusterAssignment:
    if method == "cumulative":
        return cumulative_cluster(profile, g)
    if method == "slope":
        return slope_cluster(profile, g)
    if method == "uniform":
        return uniform_cluster(profile.n_frames, g)
    raise ValueError(f"unknown clustering method {method!r}")


ASSIGNMENT_FIELDS = ("epoch", "video_id", "frame_index", "cluster_id")


def write_assignment_csv(path, rows) -> None:
    """``rows`` yields ``(epoch, video_id, ClusterAssignment)``; one CSV line per frame."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ASSIGNMENT_FIELDS)
        for epoch, video_id, assignment in rows:
            for i, cid in enumerate(assignment.ids.tolist()):
                w.writerow((epoch, video_id, i, cid))
