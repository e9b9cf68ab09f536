import csv
import json

import numpy as np
import pytest

from gradattn import layers
from gradattn.cli import EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, main
from gradattn.graddiag import aggregate_over_steps, gradient_health_score, parse_grad_flow_csv
from gradattn.metrics import MetricBundle

QUICK = ["--set", "max_epochs=4", "--set", "synthetic_per_class=60"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--out", str(out), *QUICK]) == EXIT_OK
    return out


def test_train_writes_artifacts(trained):
    for name in ("config.yaml", "metrics.csv", "gradflow.csv", "gradflow.json", "checkpoint.bin", "metrics.json"):
        assert (trained / name).stat().st_size > 0
    rows = list(csv.DictReader(open(trained / "metrics.csv")))
    assert list(rows[0]) == ["epoch", "train_acc", "val_acc", "train_loss", "val_loss", "lr"]
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4]
    bundle = MetricBundle.from_json((trained / "metrics.json").read_text())
    assert bundle.generalization_gap is not None and bundle.top1 <= bundle.top3 <= bundle.top5


def test_train_is_reproducible(trained, tmp_path):
    assert main(["train", "--out", str(tmp_path), *QUICK]) == EXIT_OK
    for name in ("metrics.csv", "checkpoint.bin", "gradflow.csv", "metrics.json"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_eval_matches_train_bundle(trained, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.bin"), "--out", str(tmp_path)]) == EXIT_OK
    ev = json.loads((tmp_path / "eval.json").read_text())
    assert ev == json.loads((trained / "metrics.json").read_text())
    assert abs(ev["recall_weighted"] - ev["top1"]) < 1e-9
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.bin"), "--split", "all"]) == EXIT_OK


def test_config_file_and_seed_flag(tmp_path):
    (tmp_path / "c.yaml").write_text("model: resnet18\nmax_epochs: 1\nsynthetic_per_class: 20\n")
    assert main(["train", "--config", str(tmp_path / "c.yaml"), "--seed", "3", "--out", str(tmp_path / "o")]) == 0
    assert "seed: 3" in (tmp_path / "o" / "config.yaml").read_text()


def test_missing_dataset_leaves_nothing(tmp_path):
    out = tmp_path / "run"
    code = main(["train", "--out", str(out), "--set", "dataset=fashion_mnist", "--set", f"data_path={tmp_path}/nope"])
    assert code == EXIT_IO and not out.exists()


def test_config_errors(tmp_path):
    assert main(["train", "--out", str(tmp_path / "o"), "--set", "lr=abc"]) == EXIT_CONFIG
    assert main(["train", "--out", str(tmp_path / "o"), "--set", "nonsense=1"]) == EXIT_CONFIG
    assert not (tmp_path / "o").exists()


def test_numeric_failure_exit(tmp_path):
    with np.errstate(all="ignore"):
        code = main(["train", "--out", str(tmp_path), "--set", "model=resnet18", "--set", "lr=1e38",
                     "--set", "max_epochs=2", "--set", "synthetic_per_class=60"])
    assert code == EXIT_NUMERIC
    assert json.loads((tmp_path / "numeric_failure.json").read_text())["epoch"] == 1


def test_diagnose(trained, tmp_path, capsys):
    ck = str(trained / "checkpoint.bin")
    assert main(["diagnose", "--checkpoint", ck, "--steps", "0", "--out", str(tmp_path / "d0")]) == EXIT_CONFIG
    assert not (tmp_path / "d0").exists()
    assert main(["diagnose", "--checkpoint", ck, "--steps", "2", "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "diagnose_report.json").read_text())
    records = parse_grad_flow_csv((tmp_path / "diagnose_gradflow.csv").read_text())
    assert {r.step for r in records} == {0, 1}
    assert report["ghs"] == gradient_health_score(aggregate_over_steps(records)).ghs
    assert "ghs" in capsys.readouterr().out


def test_diagnose_leaves_checkpoint_untouched(trained, tmp_path):
    before = (trained / "checkpoint.bin").read_bytes()
    main(["diagnose", "--checkpoint", str(trained / "checkpoint.bin"), "--steps", "1", "--out", str(tmp_path)])
    assert (trained / "checkpoint.bin").read_bytes() == before


def test_gradcheck_subset_and_coverage_listing(capsys):
    assert main(["gradcheck", "--only", "conv2d", "linear"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "PASS conv2d" in out and "ops exercised:" in out


def test_gradcheck_catches_sign_flipped_conv_backward(monkeypatch, capsys):
    original = layers._conv2d_backward

    def flipped(*args, **kwargs):
        return tuple(None if g is None else -g for g in original(*args, **kwargs))

    monkeypatch.setattr(layers, "_conv2d_backward", flipped)
    assert main(["gradcheck", "--only", "conv2d", "linear"]) == EXIT_CHECK_FAILED
    assert "FAIL conv2d" in capsys.readouterr().out


def test_gradcheck_unknown_case():
    assert main(["gradcheck", "--only", "nope"]) == EXIT_CONFIG
