"""SGD training and evaluation of the video pipeline, with JSONL metrics."""
from __future__ import annotations

import json
import logging
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import VideoCollection
from .model import PipelineConfig, build_network, pad_video, run_pipeline, sample_indices, to_input
from .tensor import Network, Tape, backward, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    eval_every: int = 1
    out_dir: str | None = None
    save_every_epoch: bool = False

    def __post_init__(self):
        if isinstance(self.pipeline, dict):
            self.pipeline = PipelineConfig.from_dict(self.pipeline)
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid training hyperparameters")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pipeline"] = self.pipeline.to_dict()
        return d


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    accuracy: float
    loss: float
    seconds: float
    stored_per_video: int
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def build_tag() -> str:
    """``git describe``-style tag of the source tree, or the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir, command: str, config: dict, seed: int, **extra) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config": config, "seed": seed, "build": build_tag(), **extra}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _batch_input(collection: VideoCollection, idx: np.ndarray, config: PipelineConfig,
                 rng: np.random.Generator | None, eval_mode: bool) -> tuple[np.ndarray, str]:
    """Network input for videos ``idx`` and the pipeline method to run them with."""
    frames = collection.frames[idx]
    if frames.shape[1] < config.n_frames:
        frames = np.stack([pad_video(f, config.n_frames) for f in frames])
    elif frames.shape[1] > config.n_frames:
        raise ValueError(f"videos have {frames.shape[1]} frames, config expects {config.n_frames}")
    method = config.method
    k = config.sample_frames
    if eval_mode and config.eval_uniform_sampling and config.clustered:
        method, k = "none", config.g
    if method == "none" and k is not None:
        sel = np.stack([sample_indices(config.n_frames, k, None if eval_mode else rng)
                        for _ in range(len(idx))])
        frames = np.take_along_axis(frames, sel[:, :, None, None, None], axis=1)
    return to_input(frames, config.dtype), method


def evaluate(network: Network, dataset: VideoCollection, config: PipelineConfig,
             epoch: int = 0, batch_size: int = 32, seed: int = 0,
             split: str = "test") -> MetricsRecord:
    """Top-1 accuracy and mean loss over ``dataset``; parameters are not touched."""
    start = time.perf_counter()
    correct, total_loss, positions = 0, 0.0, 0
    for b in range(0, len(dataset), batch_size):
        idx = np.arange(b, min(b + batch_size, len(dataset)))
        x, method = _batch_input(dataset, idx, config, None, eval_mode=True)
        out = run_pipeline(network, x, config, method=method)
        labels = dataset.labels[idx].astype(np.int64)
        loss, _ = out.loss(labels)
        total_loss += loss * len(idx)
        correct += int(np.sum(out.scores.argmax(axis=1) == labels))
        positions = out.logits.shape[1]
    n = len(dataset)
    return MetricsRecord(epoch, split, correct / n, total_loss / n,
                         time.perf_counter() - start, positions, seed)


@dataclass
class TrainResult:
    network: Network
    records: list[MetricsRecord]
    best_accuracy: float
    best_epoch: int


def _sgd_step(network: Network, grads: dict, velocity: dict, lr: float, momentum: float) -> None:
    for layer in network.layers:
        for k, p in layer.params.items():
            key = f"{layer.name}.{k}"
            g = grads[key].astype(p.dtype, copy=False)
            v = velocity.get(key)
            v = g if v is None else momentum * v + g
            velocity[key] = v
            layer.params[k] = p - p.dtype.type(lr) * v


def train(config: TrainConfig, train_data: VideoCollection,
          test_data: VideoCollection | None = None) -> TrainResult:
    """SGD with momentum; deterministic given ``config.seed``.

    Writes ``metrics.jsonl``, ``best.fvck``, ``last.fvck`` (and per-epoch
    checkpoints when asked) plus a manifest under ``config.out_dir`` if set.
    """
    pc = config.pipeline
    rng = np.random.default_rng(config.seed)
    network = build_network(pc, config.seed)
    velocity: dict[str, np.ndarray] = {}
    out = Path(config.out_dir) if config.out_dir else None
    metrics_file = None
    if out is not None:
        write_manifest(out, "train", config.to_dict(), config.seed,
                       train_videos=len(train_data), dataset_seed=int(train_data.seed))
        metrics_file = open(out / "metrics.jsonl", "w")
        save_checkpoint(network, out / "last.fvck")
    records: list[MetricsRecord] = []
    best_acc, best_epoch = -1.0, 0

    def emit(rec: MetricsRecord) -> None:
        records.append(rec)
        if metrics_file is not None:
            metrics_file.write(rec.to_json() + "\n")
            metrics_file.flush()

    try:
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            order = rng.permutation(len(train_data))
            correct, loss_sum, stored = 0, 0.0, 0
            for b in range(0, len(order), config.batch_size):
                idx = order[b : b + config.batch_size]
                x, method = _batch_input(train_data, idx, pc, rng, eval_mode=False)
                labels = train_data.labels[idx].astype(np.int64)
                tape = Tape()
                result = run_pipeline(network, x, pc, tape, method=method)
                loss, dlogits = result.loss(labels)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
                stored = max(stored, tape.stored_positions("rest") // len(idx))
                grads = backward(tape, dlogits)
                _sgd_step(network, grads, velocity, config.lr, config.momentum)
                loss_sum += loss * len(idx)
                correct += int(np.sum(result.scores.argmax(axis=1) == labels))
            n = len(train_data)
            emit(MetricsRecord(epoch, "train", correct / n, loss_sum / n,
                               time.perf_counter() - start, stored, config.seed))
            acc = records[-1].accuracy
            if test_data is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
                rec = evaluate(network, test_data, pc, epoch, seed=config.seed)
                emit(rec)
                acc = rec.accuracy
            log.info("epoch %d: %s", epoch, records[-1].to_json())
            if out is not None:
                save_checkpoint(network, out / "last.fvck")
                if config.save_every_epoch:
                    save_checkpoint(network, out / f"epoch{epoch:03d}.fvck")
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch
                if out is not None:
                    save_checkpoint(network, out / "best.fvck")
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return TrainResult(network, records, best_acc, best_epoch)


def final_test_accuracy(records: list[MetricsRecord]) -> float:
    tests = [r for r in records if r.split == "test"]
    if not tests:
        raise ValueError("no test records")
    return tests[-1].accuracy


def _run_one(args) -> tuple[str, int, list[dict]]:
    name, config, train_data, test_data = args
    result = train(config, train_data, test_data)
    return name, config.seed, [asdict(r) for r in result.records]


@dataclass
class AblationRow:
    name: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0


def summarize(results: dict[str, dict[int, list[dict]]]) -> list[AblationRow]:
    """Rows ranked by mean final test accuracy (best first)."""
    rows = []
    for name, by_seed in results.items():
        accs = [final_test_accuracy([MetricsRecord(**r) for r in recs])
                for _, recs in sorted(by_seed.items())]
        rows.append(AblationRow(name, accs))
    return sorted(rows, key=lambda r: -r.mean)


def ablation_matrix(configs: dict[str, TrainConfig], seeds, train_data: VideoCollection,
                    test_data: VideoCollection, jobs: int = 1, out_dir=None):
    """Train every named config under every seed; return ``(rows, raw_records)``.

    ``raw_records[name][seed]`` holds the metrics dicts of that run.
    """
    from dataclasses import replace

    tasks = [(name, replace(cfg, seed=s, out_dir=None), train_data, test_data)
             for name, cfg in configs.items() for s in seeds]
    raw: dict[str, dict[int, list[dict]]] = {name: {} for name in configs}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for name, seed, recs in pool.map(_run_one, tasks):
                raw[name][seed] = recs
    else:
        for task in tasks:
            name, seed, recs = _run_one(task)
            raw[name][seed] = recs
    rows = summarize(raw)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.jsonl", "w") as f:
            for name in configs:
                for seed, recs in sorted(raw[name].items()):
                    for r in recs:
                        f.write(json.dumps({"config": name, **r}, sort_keys=True) + "\n")
        summary = [{"config": r.name, "mean": r.mean, "std": r.std, "accuracies": r.accuracies}
                   for r in rows]
        (out / "ablation_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        write_manifest(out, "ablation", {n: c.to_dict() for n, c in configs.items()},
                       int(min(seeds)), seeds=list(seeds))
    return rows, raw


def default_jobs() -> int:
    return os.cpu_count() or 1
