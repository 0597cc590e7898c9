import csv
import io
import json

import numpy as np
import pytest

from simple_cra.cli import main
from simple_cra.tensor import Tensor, save_tensor


def test_analyze_cra_resnet50(capsys):
    assert main(["analyze", "--arch", "resnet50", "--variant", "cra", "--hw", "7,7"]) == 0
    out = capsys.readouterr().out.strip()
    assert out.startswith("CRA-ResNet-50, 26.31M, 4.")
    assert out.endswith("G")


def test_analyze_default_target(capsys):
    assert main(["analyze", "--arch", "resnet56", "--variant", "cra", "--format", "csv"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert rows[0]["target"] == "8x8"
    assert rows[0]["params_display"] == "918.54K"


def test_analyze_unsupported_input_size():
    assert main(["analyze", "--arch", "resnet56", "--input-size", "224"]) == 2


def test_bad_log_level_is_config_error(monkeypatch, capsys):
    monkeypatch.setenv("CRA_LOG_LEVEL", "chatty")
    assert main(["analyze", "--arch", "resnet56"]) == 2
    captured = capsys.readouterr()
    assert "CRA_LOG_LEVEL" in captured.err
    assert captured.out == ""


def test_analyze_bad_target_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["analyze", "--arch", "resnet50", "--variant", "cra", "--hw", "7x7"])
    assert info.value.code == 2


def test_ablation_default_targets(capsys):
    assert main(["ablation"]) == 0
    displays = [line.rsplit(", ", 1)[1] for line in capsys.readouterr().out.splitlines()]
    assert displays == ["26.31M", "25.95M", "25.71M", "25.59M"]


def test_ablation_single_target(capsys):
    assert main(["ablation", "--targets", "3,3"]) == 0
    assert capsys.readouterr().out.splitlines() == ["CRA-ResNet-50, <3,3>, 25.71M"]


def test_ablation_malformed_targets():
    with pytest.raises(SystemExit) as info:
        main(["ablation", "--targets", "7;5,5"])
    assert info.value.code == 2


def test_gradcheck_passes():
    assert main(["gradcheck", "--model", "toy-cra", "--tol", "1e-3", "--samples", "5"]) == 0


def test_attentions_on_zero_checkpoint(tmp_path, capsys):
    ckpt = tmp_path / "ckpt"
    assert main(["export-desc", "--arch", "toy-cra", "--checkpoint", str(ckpt), "--zero-attention", "--out", str(tmp_path / "d.json")]) == 0
    images = tmp_path / "images.crat"
    save_tensor(images, Tensor(np.random.default_rng(0).uniform(0, 1, (3, 3, 32, 32))))
    assert main(["attentions", "--checkpoint", str(ckpt), "--input", str(images), "--index", "2"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 8
    assert {row["site_key"] for row in rows} == {"CRA.1.1"}
    assert {float(row["attention_value"]) for row in rows} == {0.5}


def test_attentions_index_out_of_range(tmp_path):
    ckpt = tmp_path / "ckpt"
    main(["export-desc", "--arch", "toy-cra", "--checkpoint", str(ckpt), "--out", str(tmp_path / "d.json")])
    images = tmp_path / "images.crat"
    save_tensor(images, Tensor(np.zeros((2, 3, 32, 32))))
    assert main(["attentions", "--checkpoint", str(ckpt), "--input", str(images), "--index", "5"]) == 2


def test_attentions_missing_checkpoint(tmp_path):
    assert main(["attentions", "--checkpoint", str(tmp_path / "nope"), "--input", str(tmp_path / "x.crat")]) == 2


def test_export_desc_json(capsys):
    assert main(["export-desc", "--arch", "resnet50", "--variant", "se"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["variant"] == "se"
    assert payload["layers"][-1]["kind"] == "softmax"


def test_train_from_config(tmp_path):
    config = {
        "model": "toy-cra",
        "samples": 32,
        "test_samples": 16,
        "lr": 0.05,
        "batch_size": 16,
        "epochs": 3,
        "lr_milestones": [1, 2],
        "augment": False,
    }
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(config))
    out = tmp_path / "run"
    assert main(["train", "--config", str(path), "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "history.csv").open()))
    lrs = [float(row["lr"]) for row in rows]
    assert len(lrs) == 3
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_train_rejects_unknown_setting(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"epochs": 1, "warmup": 5}')
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "run")]) == 2
