"""Small dense-tensor engine: the handful of layers the pipeline needs.

Tensors are plain numpy arrays laid out as ``(batch, channels, height, width)``
where ``batch`` stacks frames of one or more videos in temporal order. Each
layer records what it needs for backward on a :class:`Tape`; :func:`backward`
replays the tape in reverse and returns one gradient per parameter.
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TapeEntry:
    layer: "Layer"
    cache: tuple
    section: str
    batch: int


class Tape:
    """Ordered record of forward intermediates.

    ``section`` labels the entries produced while it is set (the pipeline uses
    ``"block1"`` and ``"rest"``); ``batch`` is the number of temporal positions
    an entry holds, which is what the memory accounting reads.
    """

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self.section = "main"
        self.consumed = False

    def record(self, layer: "Layer", cache: tuple, batch: int) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        self.entries.append(TapeEntry(layer, cache, self.section, batch))

    def __len__(self) -> int:
        return len(self.entries)

    def stored_positions(self, section: str) -> int:
        """Largest number of temporal positions stored by any entry in ``section``."""
        sizes = [e.batch for e in self.entries if e.section == section]
        return max(sizes) if sizes else 0


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


class Layer:
    kind = "layer"
    params: dict[str, np.ndarray]

    def __init__(self, name: str | None = None) -> None:
        self.name = name or self.kind
        self.params = {}

    def forward(self, x: np.ndarray, tape: Tape | None, t: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, cache: tuple, grad: np.ndarray, need_input_grad: bool = True):
        """Return ``(input_grad, {param_name: grad})``."""
        raise NotImplementedError

    def hyper(self) -> tuple[int, ...]:
        return ()

    def macs(self, in_shape: tuple[int, ...]) -> tuple[int, tuple[int, ...]]:
        """MACs for one sample of ``in_shape`` (no batch axis) and the output shape."""
        return 0, in_shape

    def _expect(self, x: np.ndarray, ndim: int, channels: int | None = None) -> None:
        if x.ndim != ndim or (channels is not None and x.shape[1] != channels):
            want = ["B", str(channels) if channels is not None else "C"] + ["*"] * (ndim - 2)
            raise ShapeError(
                f"{self.name}: expected shape ({', '.join(want)}), got {tuple(x.shape)}"
            )


def _torch():
    if os.environ.get("FVAR_CONV_BACKEND", "auto") == "numpy":
        return None
    try:
        import torch
    except ImportError:  # pragma: no cover - numpy fallback
        return None
    return torch


class Conv2d(Layer):
    """2-D convolution with square kernels.

    Runs on torch's CPU kernels when torch is importable (set
    ``FVAR_CONV_BACKEND=numpy`` to force the im2col path).
    """

    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, name: str | None = None, dtype=np.float64,
                 rng: np.random.Generator | None = None) -> None:
        super().__init__(name)
        if min(in_ch, out_ch, kernel, stride) < 1 or padding < 0:
            raise ValueError("invalid conv2d hyperparameters")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding = stride, padding
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        w = rng.standard_normal((out_ch, in_ch, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(out_ch, dtype)}

    def hyper(self):
        return (self.in_ch, self.out_ch, self.kernel, self.stride, self.padding)

    def _out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {h}x{w} too small for kernel {k}")
        return ho, wo

    def forward(self, x, tape, t=None):
        self._expect(x, 4, self.in_ch)
        ho, wo = self._out_hw(x.shape[2], x.shape[3])
        w, b = self.params["weight"], self.params["bias"]
        x = x.astype(w.dtype, copy=False)
        torch = _torch()
        if torch is not None:
            out = torch.nn.functional.conv2d(
                torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b),
                stride=self.stride, padding=self.padding).numpy()
            cache = ("torch", x)
        else:
            p, s, k = self.padding, self.stride, self.kernel
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
            win = sliding_window_view(xp, (k, k), axis=(2, 3))
            win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, self.in_ch * k * k)
            out = (cols @ w.reshape(self.out_ch, -1).T + b).reshape(x.shape[0], ho, wo, -1)
            out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
            cache = ("numpy", cols, x.shape)
        if tape is not None:
            tape.record(self, cache, x.shape[0])
        return out

    def backward(self, cache, grad, need_input_grad=True):
        w = self.params["weight"]
        grad = np.ascontiguousarray(grad, dtype=w.dtype)
        gb = grad.sum(axis=(0, 2, 3))
        if cache[0] == "torch":
            import torch

            x = cache[1]
            tg, tw = torch.from_numpy(grad), torch.from_numpy(w)
            gw = torch.nn.grad.conv2d_weight(torch.from_numpy(x), w.shape, tg,
                                             stride=self.stride, padding=self.padding).numpy()
            gx = None
            if need_input_grad:
                gx = torch.nn.grad.conv2d_input(x.shape, tw, tg, stride=self.stride,
                                                padding=self.padding).numpy()
            return gx, {"weight": gw, "bias": gb}
        _, cols, in_shape = cache
        k, s, p = self.kernel, self.stride, self.padding
        b, _, ho, wo = grad.shape
        gflat = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        wm = w.reshape(self.out_ch, -1)
        grads = {"weight": (gflat.T @ cols).reshape(w.shape), "bias": gb}
        if not need_input_grad:
            return None, grads
        gcols = (gflat @ wm).reshape(b, ho, wo, self.in_ch, k, k)
        gxp = np.zeros((b, self.in_ch, in_shape[2] + 2 * p, in_shape[3] + 2 * p), w.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += (
                    gcols[..., i, j].transpose(0, 3, 1, 2))
        gx = gxp[:, :, p : p + in_shape[2], p : p + in_shape[3]] if p else gxp
        return np.ascontiguousarray(gx), grads

    def macs(self, in_shape):
        c, h, w = in_shape
        if c != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} channels, got {c}")
        ho, wo = self._out_hw(h, w)
        return ho * wo * self.out_ch * self.in_ch * self.kernel ** 2, (self.out_ch, ho, wo)


class ReLU(Layer):
    """max(0, x); the gradient at exactly 0 is 0."""

    kind = "relu"

    def forward(self, x, tape, t=None):
        mask = x > 0
        if tape is not None:
            tape.record(self, (mask,), x.shape[0])
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, cache, grad, need_input_grad=True):
        (mask,) = cache
        return np.where(mask, grad, 0).astype(grad.dtype, copy=False), {}


class MaxPool2d(Layer):
    """Non-overlapping ``size x size`` max pooling.

    Ties route the gradient to the first maximum in row-major window order.
    """

    kind = "maxpool2d"

    def __init__(self, size: int = 2, name: str | None = None) -> None:
        super().__init__(name)
        self.size = size

    def hyper(self):
        return (self.size,)

    def _views(self, x):
        s = self.size
        return [((i, j), x[:, :, i::s, j::s]) for i in range(s) for j in range(s)]

    def forward(self, x, tape, t=None):
        self._expect(x, 4)
        h, w = x.shape[2:]
        if h % self.size or w % self.size:
            raise ShapeError(f"{self.name}: spatial dims {h}x{w} not divisible by {self.size}")
        views = self._views(x)
        out = views[0][1]
        for _, v in views[1:]:
            out = np.maximum(out, v)
        if tape is not None:
            tape.record(self, (x, out), x.shape[0])
        return out

    def backward(self, cache, grad, need_input_grad=True):
        x, out = cache
        s = self.size
        gx = np.zeros_like(x, dtype=grad.dtype)
        taken = np.zeros(out.shape, bool)
        for (i, j), v in self._views(x):
            sel = (v == out) & ~taken
            taken |= sel
            gx[:, :, i::s, j::s] = np.where(sel, grad, 0)
        return gx, {}

    def macs(self, in_shape):
        c, h, w = in_shape
        return 0, (c, h // self.size, w // self.size)


class GlobalAvgPool(Layer):
    kind = "global-avg-pool"

    def forward(self, x, tape, t=None):
        self._expect(x, 4)
        if tape is not None:
            tape.record(self, (x.shape,), x.shape[0])
        return x.mean(axis=(2, 3))

    def backward(self, cache, grad, need_input_grad=True):
        (shape,) = cache
        scale = 1.0 / (shape[2] * shape[3])
        gx = np.broadcast_to((grad * scale)[:, :, None, None], shape)
        return np.array(gx, dtype=grad.dtype), {}

    def macs(self, in_shape):
        return 0, (in_shape[0],)


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, name: str | None = None,
                 dtype=np.float64, rng: np.random.Generator | None = None) -> None:
        super().__init__(name)
        if in_features < 1 or out_features < 1:
            raise ValueError("invalid linear hyperparameters")
        self.in_features, self.out_features = in_features, out_features
        rng = rng or np.random.default_rng(0)
        w = rng.standard_normal((out_features, in_features)) * np.sqrt(1.0 / in_features)
        self.params = {"weight": w.astype(dtype), "bias": np.zeros(out_features, dtype)}

    def hyper(self):
        return (self.in_features, self.out_features)

    def forward(self, x, tape, t=None):
        self._expect(x, 2, self.in_features)
        if tape is not None:
            tape.record(self, (x,), x.shape[0])
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, cache, grad, need_input_grad=True):
        (x,) = cache
        w = self.params["weight"]
        grads = {"weight": grad.T @ x, "bias": grad.sum(axis=0)}
        return (grad @ w if need_input_grad else None), grads

    def macs(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"{self.name}: expected ({self.in_features},), got {in_shape}")
        return self.in_features * self.out_features, (self.out_features,)


class TemporalShift(Layer):
    """Shift ``C // fold_div`` channels one step forward in time and as many one step back.

    The batch axis must hold whole videos of ``t`` positions each; vacated
    positions are zero-filled.
    """

    kind = "temporal-shift"

    def __init__(self, fold_div: int = 8, name: str | None = None) -> None:
        super().__init__(name)
        self.fold_div = fold_div

    def hyper(self):
        return (self.fold_div,)

    @staticmethod
    def _shift(x: np.ndarray, t: int, fold: int, sign: int) -> np.ndarray:
        b = x.shape[0]
        v = x.reshape((b // t, t) + x.shape[1:])
        out = np.zeros_like(v)
        fwd, bwd = slice(0, fold), slice(fold, 2 * fold)
        if sign < 0:
            fwd, bwd = bwd, fwd
        # channels in ``fwd`` move to the next time step, ``bwd`` to the previous
        out[:, 1:, fwd] = v[:, :-1, fwd]
        out[:, :-1, bwd] = v[:, 1:, bwd]
        out[:, :, 2 * fold :] = v[:, :, 2 * fold :]
        return out.reshape(x.shape)

    def forward(self, x, tape, t=None):
        if t is None or t < 1 or x.shape[0] % t:
            raise ShapeError(f"{self.name}: batch {x.shape[0]} is not a multiple of t={t}")
        fold = x.shape[1] // self.fold_div
        if tape is not None:
            tape.record(self, (t, fold), x.shape[0])
        return self._shift(x, t, fold, +1)

    def backward(self, cache, grad, need_input_grad=True):
        t, fold = cache
        return self._shift(grad, t, fold, -1), {}


LAYER_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls for cls in (Conv2d, ReLU, MaxPool2d, GlobalAvgPool, Linear, TemporalShift)
}


def forward(layer: Layer, x: np.ndarray, tape: Tape | None, t: int | None = None) -> np.ndarray:
    return layer.forward(x, tape, t)


def backward(tape: Tape, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Replay ``tape`` in reverse; return gradients keyed ``"<layer>.<param>"``.

    The input gradient of the first recorded entry is never needed and is
    skipped. A tape can be replayed only once.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by backward")
    tape.consumed = True
    grads: dict[str, np.ndarray] = {}
    g = loss_grad
    for i in range(len(tape.entries) - 1, -1, -1):
        entry = tape.entries[i]
        g, pg = entry.layer.backward(entry.cache, g, need_input_grad=i > 0)
        for name, value in pg.items():
            key = f"{entry.layer.name}.{name}"
            grads[key] = grads[key] + value if key in grads else value
        entry.cache = ()
    return grads


class Network:
    """Two-section feed-forward net: ``block1`` and the remaining blocks ``rest``."""

    def __init__(self, block1: list[Layer], rest: list[Layer]) -> None:
        self.block1 = list(block1)
        self.rest = list(rest)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")

    @property
    def layers(self) -> list[Layer]:
        return self.block1 + self.rest

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{layer.name}.{k}": v for layer in self.layers for k, v in layer.params.items()}

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        for layer in self.layers:
            for k in layer.params:
                layer.params[k] = values[f"{layer.name}.{k}"]

    def astype(self, dtype) -> "Network":
        import copy

        net = copy.deepcopy(self)
        for layer in net.layers:
            for k, v in layer.params.items():
                layer.params[k] = v.astype(dtype)
        return net

    @property
    def dtype(self):
        for v in self.parameters().values():
            return v.dtype
        return np.dtype(np.float64)

    def run(self, layers: Iterable[Layer], x: np.ndarray, tape: Tape | None,
            t: int | None = None) -> np.ndarray:
        for layer in layers:
            x = layer.forward(x, tape, t)
        return x

    def forward(self, x: np.ndarray, tape: Tape | None = None, t: int | None = None) -> np.ndarray:
        """All layers on every position of ``x``; returns per-position logits."""
        _check_finite(x, "network input")
        if tape is not None:
            tape.section = "block1"
        h = self.run(self.block1, x, tape, t)
        if tape is not None:
            tape.section = "rest"
        return self.run(self.rest, h, tape, t)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray):
    """Loss ``-sum_p weights[p] log softmax(logits[p])[labels[p]]`` and its logit gradient.

    ``logits`` is ``(P, C)``; ``labels`` and ``weights`` are ``(P,)``.
    """
    z = logits - logits.max(axis=1, keepdims=True)
    logq = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -float(np.sum(weights * logq[rows, labels]))
    grad = np.exp(logq)
    grad[rows, labels] -= 1.0
    grad *= weights[:, None]
    return loss, grad.astype(logits.dtype, copy=False)


def frame_loss(network: Network, x: np.ndarray, label: int, tape: Tape | None = None):
    """Mean per-frame cross-entropy of ``x`` treated as one video (all positions)."""
    logits = network.forward(x, tape, t=x.shape[0])
    p = logits.shape[0]
    return weighted_cross_entropy(logits, np.full(p, label), np.full(p, 1.0 / p))


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    rtol: float = 1e-4
    aborted: str | None = None

    @property
    def passed(self) -> bool:
        return self.aborted is None and all(e <= self.rtol for e in self.errors.values())

    def lines(self) -> list[str]:
        if self.aborted:
            return [f"aborted: {self.aborted}"]
        return [f"{k}: max rel err {v:.3e} {'ok' if v <= self.rtol else 'FAIL'}"
                for k, v in self.errors.items()]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two max-norms (0 when both vanish)."""
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(numeric), initial=0.0)))
    if diff == 0.0:
        return 0.0
    return diff / scale


def finite_difference_check(
    network: Network,
    x: np.ndarray,
    label: int,
    rtol: float = 1e-4,
    step: float = 1e-5,
    loss_and_grads: Callable[[Network], tuple[float, dict[str, np.ndarray]]] | None = None,
) -> GradCheckReport:
    """Compare backward gradients against central differences, parameter by parameter.

    ``loss_and_grads(network)`` defaults to the mean per-frame loss of ``x``;
    pipelines pass their own closure so the same harness checks them end to end.
    """
    if network.dtype != np.float64:
        raise ValueError("finite-difference checks require float64 parameters")

    if loss_and_grads is None:
        def loss_and_grads(net: Network):
            tape = Tape()
            loss, g = frame_loss(net, x, label, tape)
            return loss, backward(tape, g)

    report = GradCheckReport(rtol=rtol)
    loss, grads = loss_and_grads(network)
    if not np.isfinite(loss):
        report.aborted = f"non-finite loss {loss}"
        return report
    for layer in network.layers:
        for pname, value in layer.params.items():
            key = f"{layer.name}.{pname}"
            numeric = np.zeros_like(value)
            flat = value.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                lp, _ = loss_and_grads(network)
                flat[i] = orig - step
                lm, _ = loss_and_grads(network)
                flat[i] = orig
                if not (np.isfinite(lp) and np.isfinite(lm)):
                    report.aborted = f"non-finite loss while perturbing {key}[{i}]"
                    return report
                numeric.reshape(-1)[i] = (lp - lm) / (2 * step)
            report.errors[key] = relative_error(grads.get(key, np.zeros_like(value)), numeric)
    return report


@dataclass
class FlopReport:
    per_layer: dict[str, int]
    per_block: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.per_block.values())


def _section_macs(layers: list[Layer], in_shape: tuple[int, ...]):
    per_layer = {}
    shape = in_shape
    for layer in layers:
        m, shape = layer.macs(shape)
        per_layer[layer.name] = m
    return per_layer, shape


def count_flops(network: Network, frames: int, image_shape: tuple[int, int, int],
                rest_frames: int | None = None) -> FlopReport:
    """Multiply-accumulate counts per layer and per block.

    ``block1`` runs on ``frames`` positions and the remaining blocks on
    ``rest_frames`` (defaults to ``frames``; the clustered pipeline passes g).
    """
    rest_frames = frames if rest_frames is None else rest_frames
    b1, shape = _section_macs(network.block1, image_shape)
    rest, _ = _section_macs(network.rest, shape)
    per_layer = {k: v * frames for k, v in b1.items()}
    per_layer.update({k: v * rest_frames for k, v in rest.items()})
    per_block = {"block1": sum(b1.values()) * frames, "rest": sum(rest.values()) * rest_frames}
    return FlopReport(per_layer, per_block)


# Parameter checkpoints: "FVCK" | u32 version | u32 layer count | per layer:
# u8 kind tag, u8 name length, name, u8 hyper count, u32 hypers, u8 tensor count,
# per tensor (u8 ndim, u32 dims, float32 data) | u32 CRC32 of everything before it.
CHECKPOINT_MAGIC = b"FVCK"
CHECKPOINT_VERSION = 1
_KIND_TAGS = {kind: i + 1 for i, kind in enumerate(LAYER_KINDS)}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


def _pack_layer(layer: Layer, buf: bytearray) -> None:
    name = layer.name.encode()
    hyper = layer.hyper()
    buf += struct.pack("<BB", _KIND_TAGS[layer.kind], len(name)) + name
    buf += struct.pack(f"<B{len(hyper)}I", len(hyper), *hyper)
    buf += struct.pack("<B", len(layer.params))
    for value in layer.params.values():
        buf += struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape)
        buf += np.ascontiguousarray(value, dtype="<f4").tobytes()


def checkpoint_bytes(network: Network) -> bytes:
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(network.layers))
    buf += struct.pack("<I", len(network.block1))
    for layer in network.layers:
        _pack_layer(layer, buf)
    buf += struct.pack("<I", zlib.crc32(buf))
    return bytes(buf)


def save_checkpoint(network: Network, path) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(network))


def _build_layer(kind: str, name: str, hyper: tuple[int, ...]) -> Layer:
    if kind == "conv2d":
        i, o, k, s, p = hyper
        return Conv2d(i, o, k, stride=s, padding=p, name=name, dtype=np.float32)
    if kind == "linear":
        return Linear(*hyper, name=name, dtype=np.float32)
    if kind in ("maxpool2d", "temporal-shift"):
        return LAYER_KINDS[kind](*hyper, name=name)
    return LAYER_KINDS[kind](name=name)


def parse_checkpoint(data: bytes) -> Network:
    if len(data) < 20 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    version, n_layers, n_block1 = struct.unpack_from("<III", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    layers = []
    for _ in range(n_layers):
        tag, nlen = struct.unpack_from("<BB", data, off)
        off += 2
        name = data[off : off + nlen].decode()
        off += nlen
        (nh,) = struct.unpack_from("<B", data, off)
        hyper = struct.unpack_from(f"<{nh}I", data, off + 1)
        off += 1 + 4 * nh
        layer = _build_layer(_TAG_KINDS[tag], name, hyper)
        (nt,) = struct.unpack_from("<B", data, off)
        off += 1
        if nt != len(layer.params):
            raise CheckpointError(f"layer {name}: expected {len(layer.params)} tensors, got {nt}")
        for pname in layer.params:
            (ndim,) = struct.unpack_from("<B", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 1)
            off += 1 + 4 * ndim
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            if arr.shape != layer.params[pname].shape:
                raise CheckpointError(
                    f"layer {name}.{pname}: expected shape {layer.params[pname].shape}, got {arr.shape}"
                )
            layer.params[pname] = arr.astype(np.float32)
        layers.append(layer)
    if off != len(data) - 4:
        raise CheckpointError(f"trailing bytes: parsed {off}, file has {len(data) - 4}")
    return Network(layers[:n_block1], layers[n_block1:])


def load_checkpoint(path) -> Network:
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())
