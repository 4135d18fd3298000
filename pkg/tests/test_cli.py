import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fvar import cli, dataset

COMMANDS = ["gen-data", "train", "eval", "verify-grad", "scatter", "cluster", "bench-hamming", "flops"]


def run(*argv):
    return cli.main(list(argv))


def snapshot(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--seed", "0", "--out", str(out), "--train-count", "16",
               "--test-count", "8") == 0
    return out


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--data", str(data_dir), "--out", str(out), "--method", "cumulative",
               "--g", "4", "--epochs", "2", "--save-every-epoch") == 0
    return out


def test_help_exits_zero_and_documents_flags():
    res = subprocess.run([sys.executable, "-m", "fvar.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for c in COMMANDS:
        assert c in res.stdout
    for c in COMMANDS:
        res = subprocess.run([sys.executable, "-m", "fvar.cli", c, "--help"], capture_output=True,
                             text=True)
        assert res.returncode == 0 and "--seed" in res.stdout and "--out" in res.stdout


def test_every_flag_has_help_text():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, sp in sub.choices.items():
        for action in sp._actions:
            if action.dest != "help":
                assert action.help, f"{name} {action.option_strings} lacks help"


def test_unknown_flag_is_usage_error():
    res = subprocess.run([sys.executable, "-m", "fvar.cli", "flops", "--bogus"], capture_output=True,
                         text=True)
    assert res.returncode == 1
    assert "usage:" in res.stderr and res.stdout == ""


def test_no_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as e:
        run()
    assert e.value.code == 1


def test_gen_data_outputs_and_idempotence(data_dir, tmp_path):
    assert {"train.fvds", "test.fvds", "manifest.json"} <= set(snapshot(data_dir))
    train = dataset.read_dataset(data_dir / "train.fvds")
    assert len(train) == 16
    before = snapshot(data_dir)
    assert run("gen-data", "--seed", "0", "--out", str(data_dir), "--train-count", "16",
               "--test-count", "8") == 0
    assert snapshot(data_dir) == before


def test_invalid_spec_is_validation_error(tmp_path):
    assert run("gen-data", "--out", str(tmp_path), "--chunk-max", "40") == 1


def test_env_var_sets_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("FVAR_OUT", str(tmp_path))
    assert run("flops", "--out", "rel") == 0
    assert (tmp_path / "rel" / "flops.json").exists()
    assert (tmp_path / "rel" / "manifest.json").exists()


def test_flops_report(tmp_path):
    assert run("flops", "--method", "cumulative", "--g", "8", "--out", str(tmp_path)) == 0
    rep = json.loads((tmp_path / "flops.json").read_text())
    full, used = rep["all_frames"], rep["this_config"]
    assert used["per_block"]["block1"] == full["per_block"]["block1"]
    assert used["per_block"]["rest"] * 4 == full["per_block"]["rest"]
    before = snapshot(tmp_path)
    run("flops", "--method", "cumulative", "--g", "8", "--out", str(tmp_path))
    assert snapshot(tmp_path) == before


def test_train_and_eval(trained, data_dir, tmp_path):
    files = set(snapshot(trained))
    assert {"metrics.jsonl", "best.fvck", "last.fvck", "epoch001.fvck", "epoch002.fvck",
            "manifest.json"} <= files
    recs = [json.loads(x) for x in (trained / "metrics.jsonl").read_text().splitlines()]
    assert {r["stored_per_video"] for r in recs} == {4}
    assert run("eval", "--data", str(data_dir), "--checkpoint", str(trained / "last.fvck"),
               "--out", str(tmp_path)) == 0
    ev = json.loads((tmp_path / "eval.json").read_text())
    last_test = [r for r in recs if r["split"] == "test"][-1]
    assert ev["accuracy"] == last_test["accuracy"] and ev["stored_per_video"] == 4
    before = snapshot(tmp_path)
    run("eval", "--data", str(data_dir), "--checkpoint", str(trained / "last.fvck"), "--out", str(tmp_path))
    assert snapshot(tmp_path) == before


def test_train_rerun_identical_except_timing(trained, data_dir):
    before = snapshot(trained)
    assert run("train", "--data", str(data_dir), "--out", str(trained), "--method", "cumulative",
               "--g", "4", "--epochs", "2", "--save-every-epoch") == 0
    after = snapshot(trained)
    assert before.keys() == after.keys()
    for name in before:
        if name == "metrics.jsonl":
            strip = lambda b: [{k: v for k, v in json.loads(x).items() if k != "seconds"}  # noqa: E731
                               for x in b.decode().splitlines()]
            assert strip(before[name]) == strip(after[name])
        else:
            assert before[name] == after[name], name


def test_config_file_with_flag_override(data_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"method": "uniform", "g": 8}))
    assert run("flops", "--config", str(cfg), "--g", "4", "--out", str(tmp_path / "o")) == 0
    rep = json.loads((tmp_path / "o" / "flops.json").read_text())
    assert rep["config"]["method"] == "uniform" and rep["config"]["g"] == 4
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("flops", "--config", str(cfg), "--out", str(tmp_path / "o")) == 1


def test_missing_inputs_are_validation_errors(tmp_path):
    assert run("eval", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "x.fvck"),
               "--out", str(tmp_path)) == 1
    assert run("train", "--data", str(tmp_path), "--out", str(tmp_path)) == 1


def test_corrupt_checkpoint_is_validation_error(trained, data_dir, tmp_path):
    bad = tmp_path / "bad.fvck"
    raw = bytearray((trained / "last.fvck").read_bytes())
    raw[30] ^= 0xFF
    bad.write_bytes(bytes(raw))
    assert run("eval", "--data", str(data_dir), "--checkpoint", str(bad), "--out", str(tmp_path)) == 1


def test_verify_grad_status_tracks_bound(tmp_path):
    status = run("verify-grad", "--pairs", "200", "--out", str(tmp_path))
    summary = json.loads((tmp_path / "verify_grad.json").read_text())
    assert summary["sign_agreeing"] == 200
    assert status == (0 if summary["held"] == summary["sign_agreeing"] else 2)
    before = snapshot(tmp_path)
    run("verify-grad", "--pairs", "200", "--out", str(tmp_path))
    assert snapshot(tmp_path) == before


def test_cluster_export_per_epoch(trained, data_dir, tmp_path):
    ckpts = [str(trained / "epoch001.fvck"), str(trained / "epoch002.fvck"),
             str(trained / "epoch099.fvck")]
    assert run("cluster", "--data", str(data_dir), "--checkpoints", *ckpts, "--method", "slope",
               "--g", "4", "--videos", "6", "--out", str(tmp_path)) == 0
    rows = list(csv.DictReader(open(tmp_path / "assignments.csv")))
    blocks = {(r["epoch"], r["video_id"]) for r in rows}
    assert len(blocks) == 2 * 6 and len(rows) == 2 * 6 * 32
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["missing"] == [ckpts[2]]
    before = snapshot(tmp_path)
    run("cluster", "--data", str(data_dir), "--checkpoints", *ckpts, "--method", "slope",
        "--g", "4", "--videos", "6", "--out", str(tmp_path))
    assert snapshot(tmp_path) == before


def test_cluster_uniform_is_identical_every_epoch(trained, data_dir, tmp_path):
    ckpts = [str(trained / "epoch001.fvck"), str(trained / "epoch002.fvck")]
    assert run("cluster", "--data", str(data_dir), "--checkpoints", *ckpts, "--method", "uniform",
               "--g", "4", "--videos", "2", "--dump-signatures", "--out", str(tmp_path)) == 0
    rows = list(csv.DictReader(open(tmp_path / "assignments.csv")))
    by_epoch = {}
    for r in rows:
        by_epoch.setdefault(r["epoch"], []).append((r["video_id"], r["frame_index"], r["cluster_id"]))
    assert by_epoch["1"] == by_epoch["2"]
    assert (tmp_path / "signatures_epoch001.fvsg").exists()


def test_cluster_all_missing_is_runtime_failure(data_dir, tmp_path):
    assert run("cluster", "--data", str(data_dir), "--checkpoints", str(tmp_path / "a.fvck"),
               "--out", str(tmp_path)) == 2


def test_scatter_outputs(trained, data_dir, tmp_path):
    assert run("scatter", "--data", str(data_dir), "--checkpoint", str(trained / "last.fvck"),
               "--videos", "1", "--out", str(tmp_path)) == 0
    rows = list(csv.reader(open(tmp_path / "scatter_0000.csv")))
    assert len(rows) == 497
    report = list(csv.reader(open(tmp_path / "cluster_report.csv")))
    assert report[0] == ["cluster_id", "method", "distance"]
    before = snapshot(tmp_path)
    run("scatter", "--data", str(data_dir), "--checkpoint", str(trained / "last.fvck"),
        "--videos", "1", "--out", str(tmp_path))
    assert snapshot(tmp_path) == before


def test_bench_hamming(tmp_path):
    assert run("bench-hamming", "--bits", "100000", "--iters", "10", "--out", str(tmp_path)) == 0
    rep = json.loads((tmp_path / "bench_hamming.json").read_text())
    assert rep["exact"] and rep["oracle"] == "per-bit loop"
    assert rep["distance"] == rep["oracle_distance"]
    assert np.isfinite(rep["gbit_per_s"])
