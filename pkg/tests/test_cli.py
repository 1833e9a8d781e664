import json

import pytest

from fairnn.cli import main, parse_seeds, read_config_file
from fairnn.data import write_cache

from helpers import ADULT_PATH, synthetic_dataset

SMALL = ["--epochs", "2", "--batch_size", "32", "--encoder_widths", "8", "--latent_dim", "3", "--classifier_hidden", "4"]


@pytest.fixture
def cache_dir(tmp_path, monkeypatch):
    d = tmp_path / "cache"
    write_cache(synthetic_dataset(n=200), d / "adult.csv")
    monkeypatch.setenv("FAIRNN_CACHE_DIR", str(d))
    return d


def test_parse_seeds():
    assert parse_seeds("0..9") == list(range(10))
    assert parse_seeds("3,1, 4") == [3, 1, 4]


def test_config_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nalpha = 0.5\nbatch-size=64  # trailing\n\n")
    assert read_config_file(p) == {"alpha": "0.5", "batch_size": "64"}


def test_train_eval_export(cache_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--dataset", "adult", "--seeds", "0..1", "--out", str(out), *SMALL]) == 0
    summary = (out / "summary.csv").read_text().splitlines()
    assert len(summary) == 3
    assert (out / "logs" / "seed_1.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1]
    assert manifest["config"]["epochs"] == 2
    assert len(manifest["dataset"]["sha256"]) == 64

    ev = tmp_path / "eval.csv"
    assert main(["eval", "--checkpoint", str(out / "checkpoints" / "seed_1.json"), "--out", str(ev)]) == 0
    assert ev.read_text().splitlines()[1] == summary[2]

    lat = tmp_path / "lat"
    assert main(["export-latent", "--checkpoint", str(out / "checkpoints" / "seed_0.json"), "--dims", "0", "2", "--out", str(lat)]) == 0
    lines = (lat / "latent.csv").read_text().splitlines()
    assert lines[0] == "z1,z2,group,label"
    assert len(lines) == 1 + 100
    assert "matplotlib" in (lat / "plot_latent.py").read_text()


def test_summary_is_byte_identical_across_runs(cache_dir, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--dataset", "adult", "--seeds", "0", "--out", str(tmp_path / name), *SMALL]) == 0
    assert (tmp_path / "a" / "summary.csv").read_bytes() == (tmp_path / "b" / "summary.csv").read_bytes()


def test_config_file_and_flag_override(cache_dir, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("dataset = adult\nalpha = 0.3\nbeta = 0.1\nseeds = 2\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--beta", "0.4", "--out", str(out), *SMALL]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert (m["config"]["alpha"], m["config"]["beta"], m["seeds"]) == (0.3, 0.4, [2])


def test_harness_commands(cache_dir, tmp_path):
    g = tmp_path / "g"
    assert main(["gridsearch", "--dataset", "adult", "--alphas", "0.4,0.9", "--betas", "0.2", "--out", str(g), *SMALL]) == 0
    assert len((g / "grid.csv").read_text().splitlines()) == 3
    c = tmp_path / "c"
    assert main(["compare-ae", "--dataset", "adult", "--seeds", "0", "--out", str(c), *SMALL]) == 0
    assert (c / "ae_comparison.csv").read_text().startswith("variant,seed,accuracy,balanced_accuracy")
    a = tmp_path / "a"
    assert main(["ablate", "--dataset", "adult", "--seeds", "0", "--ps_epochs", "1", "--out", str(a), *SMALL]) == 0
    assert len((a / "ablation.csv").read_text().splitlines()) == 9


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["train", "--dataset", "adult"],
        ["train", "--dataset", "adult", "--alpha", "1.0", "--out", "x"],
        ["train", "--dataset", "adult", "--seeds", "5..2", "--out", "x"],
        ["train", "--dataset", "german", "--out", "x"],
        ["train", "--out", "x"],
    ],
)
def test_usage_errors(cache_dir, argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_unknown_config_key(cache_dir, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("dataset = adult\nlearning_rate = 0.1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_io_errors(tmp_path, monkeypatch):
    monkeypatch.setenv("FAIRNN_CACHE_DIR", str(tmp_path / "nowhere"))
    assert main(["train", "--dataset", "adult", "--out", str(tmp_path / "o")]) == 2
    assert main(["prepare", "--dataset", "adult", "--input", str(tmp_path / "missing")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["eval", "--checkpoint", str(bad)]) == 2


def test_numeric_failure_exit_code(cache_dir, tmp_path):
    argv = ["train", "--dataset", "adult", "--lr", "1e12", "--epochs", "30", "--out", str(tmp_path / "o")]
    assert main(argv + SMALL[2:]) == 3


def test_invalid_dims(cache_dir, tmp_path):
    out = tmp_path / "run"
    main(["train", "--dataset", "adult", "--seeds", "0", "--out", str(out), *SMALL])
    argv = ["export-latent", "--checkpoint", str(out / "checkpoints" / "seed_0.json"), "--dims", "1", "1", "--out", str(tmp_path / "l")]
    assert main(argv) == 1


def test_prepare_adult(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FAIRNN_CACHE_DIR", str(tmp_path))
    assert main(["prepare", "--dataset", "adult", "--input", str(ADULT_PATH)]) == 0
    out = capsys.readouterr().out
    assert "45175" in out and "1:3.03" in out
    first = (tmp_path / "adult.csv").read_bytes()
    assert main(["prepare", "--dataset", "adult", "--input", str(ADULT_PATH)]) == 0
    assert (tmp_path / "adult.csv").read_bytes() == first
