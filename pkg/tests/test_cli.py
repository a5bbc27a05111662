import csv
import filecmp
import subprocess
import sys

import pytest

from ccfcnet.cli import main, read_config_file, resolve
from ccfcnet.errors import ConfigError

SMALL_MODEL = ["--n-heads", "2", "--hidden-enc", "16", "--seed", "3"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(out), "--r", "8", "--n-per-class", "24", "--planted", "10",
                 "--effect", "0.8", "--subtypes", "2", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    # a faster schedule than the defaults so the tiny model converges in 30 epochs
    assert main(["train", "--data", str(data_dir), "--out", str(out), "--epochs", "30", "--lr-step1", "0.002",
                 "--lr-step2", "0.002", "--batch-size", "8", *SMALL_MODEL]) == 0
    return out


def test_synth_outputs(data_dir):
    rows = _rows(data_dir / "manifest.csv")
    assert len(rows) == 48 and set(rows[0]) >= {"subject_id", "label", "site", "clinical_score", "fc_path"}
    assert (data_dir / "classes.txt").read_text().split() == ["control", "patient"]
    assert len(_rows(data_dir / "planted_edges.csv")) == 10
    assert "n_per_class = 24" in (data_dir / "resolved_config").read_text()


def test_train_outputs(run_dir):
    for name in ("checkpoint/config.json", "checkpoint/tensors.index", "epoch_log.csv", "splits.csv",
                 "resolved_config", "figures/training.png"):
        assert (run_dir / name).exists(), name
    log = _rows(run_dir / "epoch_log.csv")
    assert len(log) == 30 and [r["step"] for r in log[:2]] == ["1", "2"]
    splits = {r["split"] for r in _rows(run_dir / "splits.csv")}
    assert splits == {"train", "val", "test"}


def test_eval(run_dir, capsys):
    assert main(["eval", "--run", str(run_dir), "--split", "test"]) == 0
    out = run_dir / "eval_test"
    metrics = _rows(out / "metrics.csv")[0]
    assert set(metrics) == {"split", "auc", "acc", "sen", "spc"}
    assert len(_rows(out / "predictions.csv")) == 10
    assert (out / "figures" / "roc.png").exists()
    assert "AUC" in capsys.readouterr().out


def test_counter(run_dir, tmp_path):
    assert main(["counter", "--run", str(run_dir), "--out", str(tmp_path), "--extreme-mode", "keep"]) == 0
    assert _rows(tmp_path / "counter_metrics.csv")[0]["split"] == "test"
    edges = _rows(tmp_path / "diff_edges.csv")
    assert not edges or set(edges[0]) == {"subject", "i", "j", "diff"}
    groups = {r["group"] for r in _rows(tmp_path / "plotdata" / "diff_group.csv")}
    assert "observed_control_minus_patient" in groups
    assert "extreme_mode = keep" in (tmp_path / "resolved_config").read_text()


def test_analyze(run_dir, tmp_path):
    assert main(["analyze", "--run", str(run_dir), "--out", str(tmp_path), "--k", "2"]) == 0
    assert len(_rows(tmp_path / "mask_stats.csv")) == 8
    assert (tmp_path / "figures" / "masks.png").exists() and (tmp_path / "plotdata" / "dc.csv").exists()
    clusters = {r["cluster"] for r in _rows(tmp_path / "subtypes.csv")}
    assert clusters == {"1", "2"}
    assert (tmp_path / "figures" / "subtypes.png").exists()
    assert _rows(tmp_path / "subtype_anova.csv")[-1]["variable"] == "clinical_score"


def test_resolved_config_reproduces(data_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["--data", str(data_dir), "--epochs", "4", "--plots", "false", *SMALL_MODEL]
    assert main(["train", "--out", str(a), *args]) == 0
    assert main(["train", "--config", str(a / "resolved_config"), "--out", str(b)]) == 0
    assert filecmp.cmp(a / "epoch_log.csv", b / "epoch_log.csv", shallow=False)
    for f in (a / "checkpoint").glob("*.bin"):
        assert filecmp.cmp(f, b / "checkpoint" / f.name, shallow=False), f.name


def test_kfold(data_dir, tmp_path):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--epochs", "2", "--folds", "2",
                 "--plots", "false", *SMALL_MODEL]) == 0
    rows = _rows(tmp_path / "cv_metrics.csv")
    assert [r["fold"] for r in rows] == ["1", "2", "mean", "std"]
    assert (tmp_path / "fold2" / "checkpoint" / "config.json").exists()


# --------------------------------------------------------------------------
# settings


def test_precedence(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\nseed = 2\nlr-step1 = 0.01  # trailing\n")
    env = {"CCFCNET_SEED": "1"}
    assert resolve("train", {}, None, {})["seed"] == 0
    assert resolve("train", {}, None, env)["seed"] == 1
    assert resolve("train", {}, cfg, env)["seed"] == 2
    assert resolve("train", {"seed": 3}, cfg, env)["seed"] == 3
    assert resolve("train", {}, cfg, env)["lr_step1"] == 0.01
    assert resolve("analyze", {}, None, {})["split"] == "all"


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = ten\n")
    with pytest.raises(ConfigError):
        resolve("train", {}, bad, {})
    bad.write_text("colour = blue\n")
    with pytest.raises(ConfigError, match="bad.cfg:1"):
        read_config_file(bad)


@pytest.mark.parametrize("argv, code", [
    (["train", "--out", "x"], 2),
    (["train", "--data", "/nonexistent/data", "--out", "{tmp}/o"], 3),
    (["synth", "--out", "{tmp}/s", "--r", "1"], 2),
    (["eval", "--run", "{tmp}"], 3),
])
def test_exit_codes(argv, code, tmp_path):
    argv = [a.replace("{tmp}", str(tmp_path)) for a in argv]
    assert main(argv) == code


def test_bad_ablation_and_heads(data_dir, tmp_path):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--ablate", "no_decoder"]) == 2
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path), "--n-heads", "3"]) == 2


def test_counter_refuses_linear_head(data_dir, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--data", str(data_dir), "--out", str(run), "--epochs", "1", "--ablate", "no_prototype",
                 "--plots", "false", *SMALL_MODEL]) == 0
    assert main(["counter", "--run", str(run)]) == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "ccfcnet", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth" in res.stdout
    res = subprocess.run([sys.executable, "-m", "ccfcnet", "train", "--epochs", "x"], capture_output=True, text=True)
    assert res.returncode == 2
