import csv
import json

import pytest

from chartrl.chartenv import read_tasks
from chartrl.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--difficulty", "easy", "--count", 30, "--seed", 1, "--out", d / "train.jsonl") == 0
    assert run("gen-data", "--difficulty", "hard", "--count", 20, "--split", "eval", "--seed", 1,
               "--out", d / "eval.jsonl") == 0
    return d


def test_gen_data_counts_and_determinism(tmp_path):
    assert run("gen-data", "--out-dir", tmp_path / "a", "--count", 12) == 0
    assert run("gen-data", "--out-dir", tmp_path / "b", "--count", 12) == 0
    for name, n in (("hard_train", 12), ("easy_train", 12), ("hard_eval", 500)):
        a = (tmp_path / "a" / f"{name}.jsonl").read_bytes()
        assert a == (tmp_path / "b" / f"{name}.jsonl").read_bytes()
        assert len(read_tasks(tmp_path / "a" / f"{name}.jsonl")) == n
    train_ids = {t.task_id for t in read_tasks(tmp_path / "a" / "hard_train.jsonl")}
    eval_ids = {t.task_id for t in read_tasks(tmp_path / "a" / "hard_eval.jsonl")}
    assert not train_ids & eval_ids


def test_gen_data_refuses_overwrite(tmp_path, capsys):
    out = tmp_path / "x.jsonl"
    assert run("gen-data", "--difficulty", "easy", "--count", 2, "--out", out) == 0
    assert run("gen-data", "--difficulty", "easy", "--count", 2, "--out", out) == 1
    assert "--force" in capsys.readouterr().err
    assert run("gen-data", "--difficulty", "easy", "--count", 2, "--out", out, "--force") == 0


RL = ("--steps", 6, "--group-size", 4, "--tasks-per-step", 2, "--checkpoint-every", 3)


def test_train_resume_equivalence(tmp_path, data):
    full, part = tmp_path / "full", tmp_path / "part"
    assert run("train", "--corpus", data / "train.jsonl", "--out", full, *RL) == 0
    assert run("train", "--corpus", data / "train.jsonl", "--out", part, *RL[:-2], "--checkpoint-every", 0,
               "--steps", 3) == 0
    assert run("train", "--corpus", data / "train.jsonl", "--out", part, "--resume", "--steps", 6) == 0
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
    a = json.loads((full / "checkpoint.json").read_text())["params"]
    b = json.loads((part / "checkpoint.json").read_text())["params"]
    assert a == b
    manifest = json.loads((full / "manifest.json").read_text())
    assert manifest["run_id"] and manifest["corpus_checksums"]["train"]
    with open(full / "metrics.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 6


def test_resume_requires_same_corpus(tmp_path, data):
    out = tmp_path / "r"
    assert run("train", "--corpus", data / "train.jsonl", "--out", out, *RL) == 0
    assert run("train", "--corpus", data / "eval.jsonl", "--out", out, "--resume", "--steps", 8) == 1


def test_train_refuses_overwrite_and_bad_config(tmp_path, data):
    out = tmp_path / "r"
    assert run("train", "--corpus", data / "train.jsonl", "--out", out, *RL) == 0
    assert run("train", "--corpus", data / "train.jsonl", "--out", out, *RL) == 1
    assert run("train", "--corpus", data / "train.jsonl", "--out", tmp_path / "b", "--group-size", 1) == 1
    assert run("train", "--corpus", tmp_path / "missing.jsonl", "--out", tmp_path / "c") == 1


@pytest.mark.parametrize("method,source", [("cot-sft", "oracle_canonical"), ("sft", "answer_only")])
def test_sft_dispatch(tmp_path, data, method, source):
    out = tmp_path / method
    assert run("train", "--method", method, "--corpus", data / "train.jsonl", "--out", out, "--epochs", 2) == 0
    first = json.loads((out / "traces.jsonl").read_text().splitlines()[0])
    assert first["source"] == source
    with open(out / "loss.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2
    extra = json.loads((out / "checkpoint.json").read_text())["extra"]
    assert extra["kind"] == "sft" and extra["sft_config"]["method"] == method


def test_eval_with_baseline_and_robustness(tmp_path, data, capsys):
    trained, base = tmp_path / "t", tmp_path / "b"
    assert run("train", "--method", "cot-sft", "--corpus", data / "train.jsonl", "--out", trained,
               "--epochs", 3) == 0
    assert run("train", "--corpus", data / "train.jsonl", "--out", base, "--steps", 0) == 0
    report = tmp_path / "report.json"
    assert run("eval", "--checkpoint", trained / "checkpoint.json", "--corpus", data / "eval.jsonl",
               "--baseline", base / "checkpoint.json", "--robustness", "--out", report) == 0
    doc = json.loads(report.read_text())
    assert doc["n"] == 20 and doc["baseline_accuracy"] is not None and 0 <= doc["p_value"] <= 1
    assert doc["manifest"]["corpus_checksums"]["eval"]
    assert (tmp_path / "report.csv").exists()
    rows = list(csv.DictReader(open(tmp_path / "report.robustness.csv")))
    assert rows[0]["perturbation"] == "normal"
    assert "accuracy" in capsys.readouterr().out


def test_eval_missing_checkpoint(tmp_path, data, capsys):
    assert run("eval", "--checkpoint", tmp_path / "nope.json", "--corpus", data / "eval.jsonl") == 1
    assert "does not exist" in capsys.readouterr().err


def test_export_curves(tmp_path, data):
    out = tmp_path / "r"
    assert run("train", "--corpus", data / "train.jsonl", "--out", out, *RL) == 0
    assert run("export-curves", out / "metrics.csv", "--out-dir", tmp_path / "c", "--window", 1,
               "--labels", "run") == 0
    src = list(csv.DictReader(open(out / "metrics.csv")))
    got = list(csv.DictReader(open(tmp_path / "c" / "curves.csv")))
    assert len(got) == len(src)
    for s, g in zip(src, got):
        assert g["run"] == "run"
        for k, v in s.items():
            assert float(g[k]) == float(v)
    svg = (tmp_path / "c" / "mean_accuracy_reward.svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg


def test_export_curves_rejects_mismatched_columns(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("step,loss\n0,1.0\n")
    assert run("export-curves", bad, "--out-dir", tmp_path / "c") == 1
