import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from disentangle_reid.cli import main

SYNTH = {"num_ids": 10, "images_per_outfit": 4, "num_cameras": 2, "num_train_ids": 6, "query_per_outfit": 1}
TRAIN = {"epochs": 2, "base_lr": 0.01, "warmup_initial_lr": 0.00421, "warmup_epochs": 1,
         "triplet_reduction": "mean", "factors": ["clothing", "hair"], "checkpoint_every": 1}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"synth": SYNTH, "train": TRAIN}))
    assert main(["--config", str(cfg), "--seed", "0", "--out", str(root / "ds"), "synth"]) == 0
    return root, cfg


def _run(capsys, *argv):
    capsys.readouterr()
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _manifest(path):
    return json.loads(path.read_text())


def test_synth_reproducible_and_manifest(work, tmp_path, capsys):
    root, cfg = work
    code, _, _ = _run(capsys, "--config", cfg, "--seed", 0, "--out", tmp_path / "again", "synth")
    assert code == 0
    assert (tmp_path / "again/data.bin").read_bytes() == (root / "ds/data.bin").read_bytes()
    run = _manifest(root / "ds/run_synth.json")
    assert run["seed"] == 0 and len(run["config_hash"]) == 64
    assert any(k.endswith("data.bin") for k in run["outputs"])
    assert all(len(v) == 40 for v in run["outputs"].values())


def test_synth_invalid_config_exit_2(tmp_path, capsys):
    code, _, err = _run(capsys, "--out", tmp_path, "synth", "--num-ids", 1)
    assert code == 2 and "error" in err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"synth": {"bogus": 1}}))
    assert _run(capsys, "--config", bad, "--out", tmp_path, "synth")[0] == 2


def test_unknown_flag_and_help(capsys):
    assert _run(capsys, "synth", "--nope")[0] == 2
    assert _run(capsys, "--frobnicate", "synth")[0] == 2
    code, out, _ = _run(capsys, "train", "--help")
    assert code == 0
    for flag in ("--dataset", "--baseline", "--resume", "--descriptions", "--epochs", "--base-lr"):
        assert flag in out
    code, out, _ = _run(capsys, "--help")
    for flag in ("--config", "--seed", "--out"):
        assert flag in out


def test_describe_idempotent_and_resumable(work, tmp_path, capsys):
    root, cfg = work
    out = tmp_path / "desc"
    code, text, _ = _run(capsys, "--config", cfg, "--out", out, "describe", "--dataset", root / "ds")
    assert code == 0
    first = json.loads(text)
    assert first["client_calls"] > 0 and first["client_calls"] == first["new_records"]
    code, text, _ = _run(capsys, "--config", cfg, "--out", out, "describe", "--dataset", root / "ds")
    assert json.loads(text)["client_calls"] == 0

    # simulate an interrupted run: keep only the first third of the appended records
    cache = out / "descriptions.jsonl"
    lines = cache.read_text().splitlines(keepends=True)
    full = sorted(lines)
    cache.write_text("".join(lines[: len(lines) // 3]))
    code, text, _ = _run(capsys, "--config", cfg, "--out", out, "describe", "--dataset", root / "ds")
    assert json.loads(text)["client_calls"] == len(lines) - len(lines) // 3
    assert sorted(cache.read_text().splitlines(keepends=True)) == full


def _train(capsys, cfg, ds, out, *extra):
    code, text, err = _run(capsys, "--config", cfg, "--seed", 0, "--out", out, "train", "--dataset", ds, *extra)
    assert code == 0, err
    return json.loads(text)


def test_train_baseline_changes_only_loss_weights(work, tmp_path, capsys):
    root, cfg = work
    _train(capsys, cfg, root / "ds", tmp_path / "full")
    _train(capsys, cfg, root / "ds", tmp_path / "base", "--baseline")
    a = _manifest(tmp_path / "full/run_train.json")["config"]
    b = _manifest(tmp_path / "base/run_train.json")["config"]
    assert {k for k in a if a[k] != b[k]} == {"lambda_b", "lambda_n"}
    assert b["lambda_b"] == 0 and b["lambda_n"] == 0


def test_train_deterministic_and_resume(work, tmp_path, capsys):
    root, cfg = work
    _train(capsys, cfg, root / "ds", tmp_path / "a")
    _train(capsys, cfg, root / "ds", tmp_path / "b")
    ref = (tmp_path / "a/metrics.csv").read_bytes()
    assert ref == (tmp_path / "b/metrics.csv").read_bytes()
    _train(capsys, cfg, root / "ds", tmp_path / "b", "--resume", tmp_path / "b/checkpoint_epoch_001.bin")
    assert (tmp_path / "b/metrics.csv").read_bytes() == ref


def test_train_from_descriptions(work, tmp_path, capsys):
    root, cfg = work
    code, _, err = _run(capsys, "--config", cfg, "--out", tmp_path, "train", "--dataset", root / "ds",
                        "--descriptions", tmp_path / "missing.jsonl")
    assert code == 2
    assert _run(capsys, "--config", cfg, "--out", tmp_path / "d", "describe", "--dataset", root / "ds")[0] == 0
    summary = _train(capsys, cfg, root / "ds", tmp_path / "t", "--descriptions", tmp_path / "d/descriptions.jsonl")
    assert summary["text_source"] == "descriptions"


@pytest.fixture(scope="module")
def trained(work):
    root, cfg = work
    assert main(["--config", str(cfg), "--seed", "0", "--out", str(root / "run"), "train",
                 "--dataset", str(root / "ds")]) == 0
    return root / "run/checkpoint_final.bin"


def test_eval_outputs_and_protocols(work, trained, tmp_path, capsys):
    root, _ = work
    results = {}
    for protocol in ("general", "cc", "sc"):
        code, text, err = _run(capsys, "--out", tmp_path / protocol, "eval", "--checkpoint", trained,
                               "--dataset", root / "ds", "--protocol", protocol, "--topk", 3)
        assert code == 0, err
        results[protocol] = json.loads((tmp_path / protocol / "eval.json").read_text())
        recs = [json.loads(l) for l in (tmp_path / protocol / "retrieval.jsonl").read_text().splitlines()]
        assert all(len(r["matches"]) <= 3 for r in recs)
        assert (tmp_path / protocol / "retrieval.html").exists()
    assert results["general"]["cmc"] != results["cc"]["cmc"]


def test_eval_oracle_features(work, tmp_path, capsys):
    root, _ = work
    for protocol in ("general", "cc"):
        code, text, _ = _run(capsys, "--out", tmp_path, "eval", "--oracle-features", "--dataset", root / "ds",
                             "--protocol", protocol)
        assert code == 0 and json.loads(text)["map"] == 1.0


def test_eval_missing_clothid_cc_exit_2(work, tmp_path, capsys):
    import shutil

    root, _ = work
    ds = tmp_path / "ds"
    shutil.copytree(root / "ds", ds)
    rows = list(csv.DictReader(open(ds / "query.csv")))
    rows[0]["clothid"] = ""
    with open(ds / "query.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    assert _run(capsys, "--out", tmp_path, "eval", "--oracle-features", "--dataset", ds)[0] == 0
    code, _, err = _run(capsys, "--out", tmp_path, "eval", "--oracle-features", "--dataset", ds, "--protocol", "cc")
    assert code == 2 and "clothid" in err


def test_probe_shuffled_is_chance_and_deterministic(work, trained, tmp_path, capsys):
    root, _ = work
    args = ("--seed", 1, "--out", tmp_path, "probe", "--checkpoint", trained, "--dataset", root / "ds")
    pid = json.loads(_run(capsys, *args, "--factor", "pid")[1])
    shuffled = json.loads(_run(capsys, *args, "--factor", "pid", "--shuffle-labels")[1])
    again = json.loads(_run(capsys, *args, "--factor", "pid", "--shuffle-labels")[1])
    assert pid["accuracy"] > 0.8
    assert shuffled["accuracy"] < 1.5 / shuffled["num_classes"] + 0.15
    assert shuffled == again
    assert (tmp_path / "probe_pid.json").exists() and (tmp_path / "run_probe.json").exists()


def test_report(work, trained, tmp_path, capsys):
    root, _ = work
    code, _, err = _run(capsys, "--out", tmp_path, "report", "--checkpoint", trained, "--dataset", root / "ds")
    assert code == 0, err
    rep = json.loads((tmp_path / "cluster_report.json").read_text())
    assert np.asarray(rep["coords"]).shape[1] == 2
    assert (tmp_path / "cluster.svg").read_text().startswith("<svg")
    code, _, _ = _run(capsys, "--out", tmp_path, "report", "--source", "text", "--split", "train",
                      "--dataset", root / "ds")
    assert code == 0


def test_exit_codes_via_console_entry(work, tmp_path):
    root, cfg = work
    entry = [sys.executable, "-c", "from disentangle_reid.cli import run; run()"]
    bad = tmp_path / "ckpt.bin"
    bad.write_bytes(b"garbage")
    proc = subprocess.run(entry + ["--out", str(tmp_path), "eval", "--checkpoint", str(bad),
                                   "--dataset", str(root / "ds")], capture_output=True, text=True)
    assert proc.returncode == 2 and "not an array archive" in proc.stderr
    # divergence is a runtime failure
    proc = subprocess.run(entry + ["--config", str(cfg), "--out", str(tmp_path / "div"), "train",
                                   "--dataset", str(root / "ds"), "--base-lr", "1e8"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "NonFiniteLossError" in proc.stderr
