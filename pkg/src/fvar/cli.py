"""``fvar`` command line.

Exit status: 0 success, 1 invalid arguments or inputs, 2 runtime failure
(including a verification that does not pass). Every command writes a
``manifest.json`` into its output directory; relative output paths resolve
against ``$FVAR_OUT`` when it is set.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import time
from pathlib import Path

import numpy as np

from . import clustering, dataset, gradlab, model, signatures, tensor, trainer

log = logging.getLogger("fvar")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def out_path(p: str) -> Path:
    root = os.environ.get("FVAR_OUT")
    path = Path(p)
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_split(data_dir: str, split: str) -> dataset.VideoCollection:
    path = Path(data_dir) / f"{split}.fvds"
    if not path.exists():
        raise UsageError(f"dataset file not found: {path}")
    return dataset.read_dataset(path)


def _csv_ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v]


# -- pipeline configuration shared by train / eval / cluster / flops ---------

def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="PipelineConfig JSON; flags below override its fields")
    p.add_argument("--method", choices=model.ALL_METHODS, help="clustering method")
    p.add_argument("--g", type=int, help="clusters per video")
    p.add_argument("--frames", type=int, dest="n_frames", help="frames per video")
    p.add_argument("--classes", type=int, dest="n_classes", help="number of classes")
    p.add_argument("--temporal-shift", action=argparse.BooleanOptionalAction, default=None,
                   help="shift 1/8 of channels each way in time before conv2")
    p.add_argument("--precision", choices=("float32", "float64"), help="parameter precision")
    p.add_argument("--sample-frames", type=int, help="method none: frames sampled per video")
    p.add_argument("--eval-uniform-sampling", action=argparse.BooleanOptionalAction,
                   default=None, help="evaluate clustered models on g uniformly sampled frames")


def _pipeline_config(args, base: dict | None = None) -> model.PipelineConfig:
    d = dict(base or {})
    if args.config:
        with open(args.config) as f:
            d.update(json.load(f))
    for name in ("method", "g", "n_frames", "n_classes", "temporal_shift", "precision",
                 "sample_frames", "eval_uniform_sampling"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    return model.PipelineConfig.from_dict(d)


def _manifest_config(checkpoint: Path) -> dict | None:
    manifest = checkpoint.parent / "manifest.json"
    if manifest.exists():
        cfg = json.loads(manifest.read_text()).get("config", {})
        return cfg.get("pipeline", cfg) if isinstance(cfg, dict) else None
    return None


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = dataset.DatasetSpec(
        train_count=args.train_count, test_count=args.test_count, n_frames=args.frames,
        image_size=args.image_size, p_background=args.p_background, p_black=args.p_black,
        p_foreign=args.p_foreign, chunk_len=(args.chunk_min, args.chunk_max), seed=args.seed)
    glyphs = dataset.load_idx_digits(args.mnist_images, args.mnist_labels)
    train, test = dataset.generate(spec, glyphs)
    out = out_path(args.out)
    dataset.write_dataset(train, out / "train.fvds")
    dataset.write_dataset(test, out / "test.fvds")
    trainer.write_manifest(out, "gen-data", spec.to_dict(), args.seed,
                           glyphs="mnist" if args.mnist_images else "procedural")
    print(f"wrote {len(train)} train and {len(test)} test videos to {out}")
    return 0


def cmd_train(args) -> int:
    pc = _pipeline_config(args)
    cfg = trainer.TrainConfig(pipeline=pc, epochs=args.epochs, batch_size=args.batch_size,
                              lr=args.lr, momentum=args.momentum, seed=args.seed,
                              eval_every=args.eval_every, save_every_epoch=args.save_every_epoch)
    train = _load_split(args.data, "train")
    test = _load_split(args.data, "test") if not args.no_eval else None
    if args.train_limit:
        train = train.subset(np.arange(min(args.train_limit, len(train))))
    cfg.out_dir = str(out_path(args.out))
    result = trainer.train(cfg, train, test)
    last = result.records[-1]
    print(f"best accuracy {result.best_accuracy:.4f} at epoch {result.best_epoch}; "
          f"last {last.split} accuracy {last.accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    pc = _pipeline_config(args, _manifest_config(ckpt))
    net = tensor.load_checkpoint(ckpt).astype(pc.dtype)
    data = _load_split(args.data, args.split)
    rec = trainer.evaluate(net, data, pc, seed=args.seed, split=args.split)
    out = out_path(args.out)
    d = rec.__dict__.copy()
    d.pop("seconds")
    _dump(out / "eval.json", d)
    trainer.write_manifest(out, "eval", pc.to_dict(), args.seed, checkpoint=str(ckpt))
    print(f"{args.split} accuracy {rec.accuracy:.4f} loss {rec.loss:.4f}")
    return 0


def _toy_pipeline_check(seed: int) -> tensor.GradCheckReport:
    pc = model.PipelineConfig(g=2, method="cumulative", n_frames=4, precision="float64",
                              image_size=8, channels=(4, 4), temporal_shift=True)
    net = model.build_network(pc, seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 4, 3, 8, 8))

    def loss_and_grads(n):
        tape = tensor.Tape()
        out = model.run_pipeline(n, x, pc, tape)
        loss, g = out.loss([1])
        return loss, tensor.backward(tape, g)

    return tensor.finite_difference_check(net, x[0], 1, loss_and_grads=loss_and_grads)


def cmd_verify_grad(args) -> int:
    survey = gradlab.bound_survey(args.pairs, args.dim, args.classes, args.seed, args.eps)
    summary = {"pairs": survey.pairs, "sign_agreeing": survey.agreeing, "held": survey.held,
               "rate": survey.rate, "worst_excess": survey.worst_excess, "eps": args.eps}
    ok = survey.all_hold
    print(f"bound held on {survey.held}/{survey.agreeing} sign-agreeing pairs "
          f"({100 * survey.rate:.2f}%), worst excess {survey.worst_excess:.3e}")
    if args.finite_differences:
        report = _toy_pipeline_check(args.seed)
        summary["finite_differences"] = {"passed": report.passed, "errors": report.errors}
        for line in report.lines():
            print(f"  fd {line}")
        ok = ok and report.passed
    out = out_path(args.out)
    _dump(out / "verify_grad.json", summary)
    trainer.write_manifest(out, "verify-grad", vars_clean(args), args.seed)
    return 0 if ok else 2


def _network_for(args, pc: model.PipelineConfig) -> tensor.Network:
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        if not ckpt.exists():
            raise UsageError(f"checkpoint not found: {ckpt}")
        return tensor.load_checkpoint(ckpt)
    return model.build_network(pc, args.seed)


def cmd_scatter(args) -> int:
    pc = _pipeline_config(args, _manifest_config(Path(args.checkpoint)) if args.checkpoint else None)
    net = _network_for(args, pc)
    data = _load_split(args.data, args.split)
    out = out_path(args.out)
    methods = args.methods.split(",")
    summary = {"videos": []}
    reports = []
    for v in range(min(args.videos, len(data))):
        x = model.to_input(data.frames[v], np.float64)
        label = int(data.labels[v])
        table = gradlab.activation_gradient_scatter(net, x, label)
        table.write_csv(out / f"scatter_{v:04d}.csv")
        reps = gradlab.cluster_gradient_reports(net, x, label, methods, args.g)
        reports += list(reps.values())
        summary["videos"].append({
            "video": v, "rows": len(table.rows), "pearson_euclid": table.pearson,
            "pearson_hamming": table.pearson_hamming,
            "mean_distance": {m: r.mean for m, r in reps.items()}})
    gradlab.write_report_csv(out / "cluster_report.csv", reports)
    _dump(out / "scatter_summary.json", summary)
    trainer.write_manifest(out, "scatter", pc.to_dict(), args.seed, checkpoint=args.checkpoint)
    for row in summary["videos"]:
        print(f"video {row['video']}: pearson {row['pearson_euclid']:.3f}  " +
              "  ".join(f"{m} {d:.4g}" for m, d in row["mean_distance"].items()))
    return 0


def _checkpoint_epoch(path: Path, default: int) -> int:
    m = re.search(r"(\d+)", path.stem)
    return int(m.group(1)) if m else default


def cmd_cluster(args) -> int:
    pc = _pipeline_config(args)
    if not pc.clustered:
        raise UsageError("cluster needs --method cumulative, slope or uniform")
    data = _load_split(args.data, args.split)
    paths = [Path(p) for p in args.checkpoints]
    missing = [p for p in paths if not p.exists()]
    for p in missing:
        print(f"missing checkpoint: {p}", file=sys.stderr)
    present = [p for p in paths if p.exists()]
    if not present and paths:
        return 2
    out = out_path(args.out)
    nets = [(_checkpoint_epoch(p, i), tensor.load_checkpoint(p)) for i, p in enumerate(present)]
    if not paths:
        nets = [(0, model.build_network(pc, args.seed))]
    rows = []
    n_videos = min(args.videos, len(data))
    for epoch, net in nets:
        x = model.to_input(data.frames[:n_videos], net.dtype)
        h = net.run(net.block1, x.reshape((-1,) + x.shape[2:]), None, pc.n_frames)
        for v, a in enumerate(model.cluster_videos(h, n_videos, pc.method, pc.g)):
            rows.append((epoch, v, a))
        if args.dump_signatures:
            words = signatures.binarize_frames(h)
            bit_len = int(np.prod(h.shape[1:]))
            signatures.write_signature_dump(out / f"signatures_epoch{epoch:03d}.fvsg", words, bit_len)
    clustering.write_assignment_csv(out / "assignments.csv", rows)
    trainer.write_manifest(out, "cluster", pc.to_dict(), args.seed,
                           checkpoints=[str(p) for p in paths], missing=[str(p) for p in missing])
    print(f"wrote {len(rows)} assignment blocks to {out / 'assignments.csv'}")
    return 0


def cmd_bench_hamming(args) -> int:
    rng = np.random.default_rng(args.seed)
    words = signatures.n_words(args.bits)
    bits = rng.random((2, args.bits)) > 0.5
    a = signatures.Signature(signatures.pack_bits(bits[0]), args.bits)
    b = signatures.Signature(signatures.pack_bits(bits[1]), args.bits)
    start = time.perf_counter()
    for _ in range(args.iters):
        d = signatures.hamming(a, b)
    elapsed = time.perf_counter() - start
    naive = signatures.hamming_naive(a, b) if args.bits <= args.naive_limit else int(
        np.count_nonzero(bits[0] != bits[1]))
    exact = d == naive
    result = {"bits": args.bits, "words": words, "iters": args.iters, "distance": d,
              "oracle_distance": naive, "exact": exact,
              "oracle": "per-bit loop" if args.bits <= args.naive_limit else "unpacked compare",
              "seconds": elapsed, "gbit_per_s": args.bits * args.iters / max(elapsed, 1e-12) / 1e9}
    out = out_path(args.out)
    _dump(out / "bench_hamming.json", result)
    trainer.write_manifest(out, "bench-hamming", vars_clean(args), args.seed)
    print(f"{args.iters} x {args.bits} bits: {elapsed:.4f}s ({result['gbit_per_s']:.2f} Gbit/s); "
          f"distance {d}, oracle {naive}, {'exact' if exact else 'MISMATCH'}")
    return 0 if exact else 2


def cmd_flops(args) -> int:
    pc = _pipeline_config(args)
    net = model.build_network(pc, args.seed)
    shape = (3, pc.image_size, pc.image_size)
    full = tensor.count_flops(net, pc.n_frames, shape)
    rest_frames = pc.g if pc.clustered else (pc.sample_frames or pc.n_frames)
    b1_frames = pc.n_frames if pc.clustered or not pc.sample_frames else pc.sample_frames
    used = tensor.count_flops(net, b1_frames, shape, rest_frames=rest_frames)
    result = {"config": pc.to_dict(),
              "all_frames": {"per_block": full.per_block, "per_layer": full.per_layer,
                             "total": full.total},
              "this_config": {"per_block": used.per_block, "per_layer": used.per_layer,
                              "total": used.total}}
    out = out_path(args.out)
    _dump(out / "flops.json", result)
    trainer.write_manifest(out, "flops", pc.to_dict(), args.seed)
    print(f"MACs/video: all frames {full.total:,}; {pc.method} {used.total:,} "
          f"(block1 {used.per_block['block1']:,} + rest {used.per_block['rest']:,})")
    return 0


def vars_clean(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fvar", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=0, help="seed for all randomness")
        sp.add_argument("--jobs", type=int, default=trainer.default_jobs(),
                        help="worker cap (default: available CPUs)")
        sp.add_argument("--out", default=f"runs/{name}", help="output directory")
        return sp

    sp = command("gen-data", cmd_gen_data, "generate the moving-digit dataset")
    sp.add_argument("--train-count", type=int, default=1800, help="training videos")
    sp.add_argument("--test-count", type=int, default=600, help="test videos")
    sp.add_argument("--frames", type=int, default=32, help="frames per video")
    sp.add_argument("--image-size", type=int, default=32, help="frame side in pixels")
    sp.add_argument("--p-background", type=float, default=1 / 3, help="P(background chunk)")
    sp.add_argument("--p-black", type=float, default=1 / 3, help="P(black chunk)")
    sp.add_argument("--p-foreign", type=float, default=1 / 3, help="P(foreign-digit chunk)")
    sp.add_argument("--chunk-min", type=int, default=4, help="shortest distractor chunk")
    sp.add_argument("--chunk-max", type=int, default=12, help="longest distractor chunk")
    sp.add_argument("--mnist-images", help="IDX image file (procedural glyphs if absent)")
    sp.add_argument("--mnist-labels", help="IDX label file")

    sp = command("train", cmd_train, "train a pipeline")
    sp.add_argument("--data", required=True, help="directory holding train.fvds/test.fvds")
    _add_pipeline_flags(sp)
    sp.add_argument("--epochs", type=int, default=20, help="training epochs")
    sp.add_argument("--batch-size", type=int, default=16, help="videos per batch")
    sp.add_argument("--lr", type=float, default=0.01, help="learning rate")
    sp.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    sp.add_argument("--eval-every", type=int, default=1, help="epochs between test evaluations")
    sp.add_argument("--save-every-epoch", action="store_true", help="keep epochNNN.fvck files")
    sp.add_argument("--train-limit", type=int, help="use only the first N training videos")
    sp.add_argument("--no-eval", action="store_true", help="skip test evaluation")

    sp = command("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--checkpoint", required=True, help="FVCK checkpoint")
    sp.add_argument("--split", default="test", choices=("train", "test"), help="split to score")
    _add_pipeline_flags(sp)

    sp = command("verify-grad", cmd_verify_grad, "check the pairwise gradient error bound")
    sp.add_argument("--pairs", type=int, default=10000, help="sign-agreeing pairs to draw")
    sp.add_argument("--dim", type=int, default=16, help="feature dimension")
    sp.add_argument("--classes", type=int, default=4, help="classes in the testbed")
    sp.add_argument("--eps", type=float, default=1e-9, help="slack on the bound")
    sp.add_argument("--finite-differences", action="store_true",
                    help="also finite-difference check the clustered pipeline on a toy input")

    sp = command("scatter", cmd_scatter,
                 "activation vs gradient distances and per-cluster gradient errors")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--checkpoint", help="FVCK checkpoint (random init if omitted)")
    sp.add_argument("--split", default="test", choices=("train", "test"), help="split")
    sp.add_argument("--videos", type=int, default=3, help="videos to analyse")
    sp.add_argument("--methods", default="cumulative,slope,uniform", help="comma list")
    _add_pipeline_flags(sp)
    sp.set_defaults(g=16)

    sp = command("cluster", cmd_cluster, "export cluster assignments per checkpoint")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--checkpoints", nargs="*", default=[], help="checkpoints, one per epoch")
    sp.add_argument("--split", default="test", choices=("train", "test"), help="split")
    sp.add_argument("--videos", type=int, default=6, help="videos to export")
    sp.add_argument("--dump-signatures", action="store_true", help="also write FVSG dumps")
    _add_pipeline_flags(sp)

    sp = command("bench-hamming", cmd_bench_hamming, "Hamming kernel throughput and exactness")
    sp.add_argument("--bits", type=int, default=1_000_000, help="signature length")
    sp.add_argument("--iters", type=int, default=1000, help="timed repetitions")
    sp.add_argument("--naive-limit", type=int, default=2_000_000,
                    help="largest length checked with the per-bit loop")

    sp = command("flops", cmd_flops, "multiply-accumulate counts per block")
    _add_pipeline_flags(sp)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, dataset.DatasetFormatError, tensor.CheckpointError) as e:
        print(f"fvar {args.command}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - report and map to the runtime-failure status
        log.exception("runtime failure")
        print(f"fvar {args.command}: runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
