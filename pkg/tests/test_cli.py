import json

import pytest

from nonlocal_crf.cli import main

CONFIG = """
[task]
name = "softcon"
n = 8
k = 4
n_train = 30
n_dev = 5
n_test = 10
seed = 3

[solver]
algorithm = "rda"
max_iters = 50

[learner]
crf_iters = 200
max_iters = 30
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(CONFIG)
    return path


def test_generate_train_infer_eval(tmp_path, config, capsys):
    data = tmp_path / "data"
    assert main(["generate", "--config", str(config), "--out", str(data)]) == 0
    first = (data / "train.jsonl").read_text().splitlines()
    assert json.loads(first[0])["schema"].startswith("nonlocal-crf/dataset/")
    assert len(first) == 31

    models = tmp_path / "models"
    assert main(["train", "--config", str(config), "--data", str(data / "train.jsonl"), "--out", str(models)]) == 0
    assert (models / "model_baseline.json").exists() and (models / "model_augmented.json").exists()

    pred = tmp_path / "pred"
    rc = main(["infer", "--config", str(config), "--model", str(models / "model_augmented.json"),
               "--data", str(data / "test.jsonl"), "--out", str(pred), "--max-iters", "20"])
    assert rc == 0
    lines = (pred / "predictions.jsonl").read_text().splitlines()
    assert len(lines) == 10 and len(json.loads(lines[0])["labels"]) == 8
    assert (pred / "trace_infer.tsv").read_text().startswith("# nonlocal-crf/trace/1")

    capsys.readouterr()
    rc = main(["eval", "--config", str(config), "--model", str(models / "model_augmented.json"),
               "--data", str(data / "test.jsonl"), "--constraints", str(data / "energy.json"),
               "--out", str(tmp_path / "ev")])
    assert rc == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert 0.0 <= metrics["token_accuracy"] <= 1.0 and "total_violations" in metrics


def test_seed_flag_changes_data(tmp_path, config):
    main(["generate", "--config", str(config), "--out", str(tmp_path / "a")])
    main(["generate", "--config", str(config), "--out", str(tmp_path / "b"), "--seed", "4"])
    assert (tmp_path / "a" / "train.jsonl").read_text() != (tmp_path / "b" / "train.jsonl").read_text()


def test_bench_writes_report(tmp_path, config):
    out = tmp_path / "bench"
    assert main(["bench", "--config", str(config), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert "baseline" in report["metrics"] and report["feasibility"]["infeasible"] == 0


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text('[learner]\npsi_step = 0.1\nnonsense = 1\n')
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "learner.nonsense" in capsys.readouterr().err
    assert main(["train", "--out", str(tmp_path)]) == 2


def test_euclidean_rejected_for_labeling(tmp_path, config, capsys):
    assert main(["bench", "--config", str(config), "--solver", "euclidean", "--out", str(tmp_path)]) == 2
    assert "solver.algorithm" in capsys.readouterr().err


def test_missing_file_exit_code(tmp_path, capsys):
    assert main(["infer", "--model", str(tmp_path / "nope.json"), "--data", str(tmp_path / "x.jsonl"),
                 "--out", str(tmp_path)]) == 1
