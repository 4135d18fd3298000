"""Measurements of how well one aggregated-activation gradient stands in for a sum.

Two settings:

* a linear-softmax testbed (features -> ReLU(w_c . x) logits -> softmax), where
  the two-frame gradients and the Jensen-style error bound are evaluated in
  closed form at float64;
* the CNN itself, where per-frame gradients are compared against the gradient
  of cluster-mean activations.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterAssignment, assign, cumulative_profile, uniform_cluster
from .model import ClusterMean
from .signatures import binarize_frames, popcount64
from .tensor import Network, Tape, backward, weighted_cross_entropy

# -- linear-softmax testbed ---------------------------------------------------


def softmax_probs(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``q_c(x) = softmax_c(relu(w_c . x))`` for weights ``w`` of shape ``(C, D)``."""
    z = np.maximum(w @ x, 0.0)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def pair_loss(x1, x2, w, y) -> float:
    """Mean cross-entropy of the two frames."""
    return -0.5 * (np.log(softmax_probs(x1, w)[y]) + np.log(softmax_probs(x2, w)[y]))


def averaged_loss(x1, x2, w, y) -> float:
    """Cross-entropy of the averaged frame."""
    return -float(np.log(softmax_probs((x1 + x2) / 2, w)[y]))


def _onehot(y: int, c: int) -> np.ndarray:
    d = np.zeros(c)
    d[y] = 1.0
    return d


def grad_true_pair(x1, x2, w, y) -> np.ndarray:
    """Mean of the two per-frame weight gradients, ``(C, D)``.

    Written for the active ReLU region: row ``c`` is
    ``(x1 (q_c(x1) - [c == y]) + x2 (q_c(x2) - [c == y])) / 2``.
    """
    d = _onehot(y, w.shape[0])
    return 0.5 * (np.outer(softmax_probs(x1, w) - d, x1) + np.outer(softmax_probs(x2, w) - d, x2))


def grad_approx_pair(x1, x2, w, y) -> np.ndarray:
    """Weight gradient at the averaged frame, ``(C, D)``."""
    xm = (x1 + x2) / 2
    return np.outer(softmax_probs(xm, w) - _onehot(y, w.shape[0]), xm)


@dataclass
class BoundCheck:
    lhs: np.ndarray
    rhs: np.ndarray
    sign_agreement: bool
    holds: bool
    eps: float
    # x_mean * ((q(x1) + q(x2)) / 2 - q(x_mean)): the exact remainder of
    # lhs-with-sign after subtracting the bound term
    jensen_gap: np.ndarray = field(repr=False, default=None)

    @property
    def worst_excess(self) -> float:
        return float(np.max(self.lhs - self.rhs))


def jensen_bound_check(x1, x2, w, y, eps: float = 1e-9) -> BoundCheck:
    """Evaluate ``|grad_true - grad_approx| <= |(x1 - x2)(q(x1) - q(x2))| / 4`` elementwise.

    ``holds`` is only meaningful when the per-class projections of the two
    frames agree in sign; otherwise it is recorded but not a failure.
    """
    q1, q2 = softmax_probs(x1, w), softmax_probs(x2, w)
    xm = (x1 + x2) / 2
    lhs = np.abs(grad_true_pair(x1, x2, w, y) - grad_approx_pair(x1, x2, w, y))
    rhs = 0.25 * np.abs(np.outer(q1 - q2, x1 - x2))
    agree = bool(np.all(np.sign(w @ x1) == np.sign(w @ x2)))
    gap = np.outer((q1 + q2) / 2 - softmax_probs(xm, w), xm)
    return BoundCheck(lhs, rhs, agree, bool(np.all(lhs <= rhs + eps)), eps, gap)


def sample_sign_agreeing_pair(rng: np.random.Generator, dim: int, classes: int,
                              scale: float = 0.5, max_halvings: int = 60):
    """Draw ``(x1, x2, w, y)`` with ``sign(w x1) == sign(w x2)`` for every class.

    ``x2 = x1 + s * delta``; ``s`` is halved until all projections keep their
    sign. If that fails the whole draw is rejected and repeated.
    """
    while True:
        w = rng.standard_normal((classes, dim))
        x1 = rng.standard_normal(dim)
        y = int(rng.integers(classes))
        delta = rng.standard_normal(dim)
        s = scale
        base = np.sign(w @ x1)
        if np.any(base == 0):
            continue
        for _ in range(max_halvings):
            x2 = x1 + s * delta
            if np.all(np.sign(w @ x2) == base):
                return x1, x2, w, y
            s /= 2


@dataclass
class BoundSurvey:
    pairs: int
    agreeing: int
    held: int
    worst_excess: float

    @property
    def rate(self) -> float:
        return self.held / self.agreeing if self.agreeing else 1.0

    @property
    def all_hold(self) -> bool:
        return self.held == self.agreeing


def bound_survey(pairs: int, dim: int = 16, classes: int = 4, seed: int = 0,
                 eps: float = 1e-9) -> BoundSurvey:
    rng = np.random.default_rng(seed)
    held, agreeing, worst = 0, 0, -np.inf
    for _ in range(pairs):
        check = jensen_bound_check(*sample_sign_agreeing_pair(rng, dim, classes), eps=eps)
        if check.sign_agreement:
            agreeing += 1
            held += check.holds
            worst = max(worst, check.worst_excess)
    return BoundSurvey(pairs, agreeing, held, float(worst))


# -- CNN measurements ---------------------------------------------------------


def _frame_grads(network: Network, layers, x: np.ndarray, label: int, keys) -> np.ndarray:
    """Gradient of one position's cross-entropy w.r.t. params ``keys``, flattened."""
    tape = Tape()
    logits = network.run(layers, x, tape, 1)
    _, g = weighted_cross_entropy(logits, np.array([label]), np.array([1.0]))
    grads = backward(tape, g)
    return np.concatenate([grads[k].ravel() for k in keys])


def block1_preact(network: Network, frames: np.ndarray) -> np.ndarray:
    return network.run(network.block1, frames.astype(network.dtype, copy=False), None, 1)


@dataclass
class ScatterTable:
    rows: np.ndarray  # (pairs, 5): i, j, euclid_act, hamming_act, euclid_grad

    @property
    def pearson(self) -> float:
        """Correlation of activation Euclidean distance with gradient distance."""
        a, g = self.rows[:, 2], self.rows[:, 4]
        if np.std(a) == 0 or np.std(g) == 0:
            return float("nan")
        return float(np.corrcoef(a, g)[0, 1])

    @property
    def pearson_hamming(self) -> float:
        a, g = self.rows[:, 3], self.rows[:, 4]
        if np.std(a) == 0 or np.std(g) == 0:
            return float("nan")
        return float(np.corrcoef(a, g)[0, 1])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("pair_i", "pair_j", "euclid_act", "hamming_act", "euclid_grad"))
            for i, j, ea, ha, eg in self.rows:
                w.writerow((int(i), int(j), repr(float(ea)), int(ha), repr(float(eg))))


def activation_gradient_scatter(network: Network, frames: np.ndarray, label: int) -> ScatterTable:
    """Distances over every unordered frame pair of one video.

    Activations are block-1 pre-activation maps; gradients are those of the
    block-1 parameters under each frame's own cross-entropy (frames processed
    independently). ``frames`` is network-ready input ``(N, 3, H, W)``.
    """
    net = network.astype(np.float64)
    x = frames.astype(np.float64)
    keys = [f"{layer.name}.{k}" for layer in net.block1 for k in layer.params]
    acts = block1_preact(net, x)
    grads = np.stack([_frame_grads(net, net.layers, x[i : i + 1], label, keys)
                      for i in range(len(x))])
    words = binarize_frames(acts)
    flat = acts.reshape(len(x), -1)
    n = len(x)
    ii, jj = np.triu_indices(n, k=1)
    ea = np.linalg.norm(flat[ii] - flat[jj], axis=1)
    ha = popcount64(words[ii] ^ words[jj]).sum(axis=1)
    eg = np.linalg.norm(grads[ii] - grads[jj], axis=1)
    return ScatterTable(np.column_stack([ii, jj, ea, ha, eg]).astype(np.float64))


@dataclass
class GradientReport:
    method: str
    distances: np.ndarray  # one per non-empty cluster
    sizes: list[int]
    assignment: ClusterAssignment

    @property
    def mean(self) -> float:
        return float(self.distances.mean())

    @property
    def max(self) -> float:
        return float(self.distances.max())


def report_block_keys(network: Network) -> list[str]:
    """Parameters of the first block after aggregation (its first conv)."""
    for layer in network.rest:
        if layer.params:
            return [f"{layer.name}.{k}" for k in layer.params]
    raise ValueError("network has no parameterized layer after block 1")


def cluster_gradient_reports(network: Network, frames: np.ndarray, label: int,
                             methods=("cumulative", "slope", "uniform"),
                             g: int = 16) -> dict[str, GradientReport]:
    """Per-cluster ``|| sum_i grad L_i - |k| grad L(mean_k) ||`` for each method.

    Gradients are taken w.r.t. the first post-aggregation block; per-frame
    gradients are shared across methods.
    """
    net = network.astype(np.float64)
    x = frames.astype(np.float64)
    keys = report_block_keys(net)
    acts = block1_preact(net, x)
    per_frame = np.stack([_frame_grads(net, net.rest, acts[i : i + 1], label, keys)
                          for i in range(len(x))])
    words = binarize_frames(acts) if any(m != "uniform" for m in methods) else None
    reports = {}
    for method in methods:
        if method == "uniform":
            a = uniform_cluster(len(x), g)
        else:
            a = assign(method, cumulative_profile(words), g)
        groups = a.groups()
        means = ClusterMean().apply(acts, [a], len(groups), None)
        dist = []
        for k, (s, e) in enumerate(groups):
            approx = (e - s) * _frame_grads(net, net.rest, means[k : k + 1], label, keys)
            dist.append(np.linalg.norm(per_frame[s:e].sum(axis=0) - approx))
        reports[method] = GradientReport(method, np.array(dist), a.sizes, a)
    return reports


def cluster_gradient_report(network: Network, frames: np.ndarray, label: int,
                            method: str, g: int = 16) -> GradientReport:
    return cluster_gradient_reports(network, frames, label, (method,), g)[method]


def write_report_csv(path, reports) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("cluster_id", "method", "distance"))
        for rep in reports:
            for k, d in enumerate(rep.distances.tolist(), start=1):
                w.writerow((k, rep.method, repr(d)))
