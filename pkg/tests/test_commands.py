import json

import pandas as pd
import pytest

from maxprop.commands import (
    CONFIG_SNAPSHOT,
    EXIT_GRADCHECK,
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    METRICS_FILE,
    RESULTS_FILE,
    WEIGHTS_FILE,
    ExperimentRunner,
)
from maxprop.config import parse_run_config
from maxprop.training import METRICS_COLUMNS, read_metrics

from conftest import TINY_CONFIG


@pytest.fixture
def runner():
    return ExperimentRunner()


@pytest.fixture
def trained_run(runner, tiny_config_path, tmp_path):
    out = tmp_path / "run"
    report = runner.execute("train", config=str(tiny_config_path), out=str(out))
    assert report["exit_code"] == EXIT_OK, report
    return out


def test_train_writes_run_directory(trained_run, tiny_config_path):
    assert {p.name for p in trained_run.iterdir()} >= {METRICS_FILE, WEIGHTS_FILE, CONFIG_SNAPSHOT}
    metrics = read_metrics(trained_run / METRICS_FILE)
    assert list(metrics.columns) == METRICS_COLUMNS
    assert metrics["epoch"].tolist() == [0, 1]
    snapshot = parse_run_config((trained_run / CONFIG_SNAPSHOT).read_text())
    assert snapshot.name == "tiny_maxprop" and snapshot.train.epochs == 2


def test_train_is_byte_deterministic(runner, tiny_config_path, tmp_path):
    for name in ("a", "b"):
        assert runner.execute("train", config=str(tiny_config_path), out=str(tmp_path / name))["exit_code"] == EXIT_OK
    assert (tmp_path / "a" / METRICS_FILE).read_bytes() == (tmp_path / "b" / METRICS_FILE).read_bytes()
    assert (tmp_path / "a" / WEIGHTS_FILE).read_bytes() == (tmp_path / "b" / WEIGHTS_FILE).read_bytes()


def test_eval_reproduces_final_validation_accuracy(runner, trained_run, tiny_config_path):
    report = runner.execute("eval", config=str(tiny_config_path), out=str(trained_run))
    assert report["exit_code"] == EXIT_OK
    last = read_metrics(trained_run / METRICS_FILE).iloc[-1]
    assert report["top1"] == last["val_acc"]

    lines = (trained_run / RESULTS_FILE).read_text().splitlines()
    assert len(lines) == 1
    record = json.loads(lines[0])
    assert set(record) == {"run", "seed", "dataset", "combiner", "top1", "top5", "diverged"}
    assert record["top5"] >= record["top1"]
    assert record["seed"] == 1 and record["diverged"] is False


def test_eval_with_wrong_architecture_is_a_usage_error(runner, trained_run, tiny_config_path):
    report = runner.execute("eval", config=str(tiny_config_path), out=str(trained_run), overrides=["network.preset=small"])
    assert report["exit_code"] == EXIT_USAGE
    assert "error" in report


def test_unknown_config_key_is_a_usage_error(runner, tiny_config_path, tmp_path):
    report = runner.execute("train", config=str(tiny_config_path), out=str(tmp_path / "x"),
                            overrides=["train.laerning_rate=0.1"])
    assert report["exit_code"] == EXIT_USAGE
    assert "laerning_rate" in report["error"]


def test_missing_and_corrupt_dataset_files_are_io_errors(runner, tmp_path):
    config = tmp_path / "fashion.ini"
    config.write_text("[dataset]\nkind = fashion_mnist\ntrain_images = a\ntrain_labels = b\ntest_images = c\n"
                      "test_labels = d\n[network]\npreset = tiny\n")
    assert runner.execute("train", config=str(config), out=str(tmp_path / "out"))["exit_code"] == EXIT_IO
    for name in "abcd":
        (tmp_path / name).write_bytes(b"\x00\x00\x08")
    assert runner.execute("train", config=str(config), out=str(tmp_path / "out"))["exit_code"] == EXIT_IO


def test_unknown_verb(runner):
    assert runner.execute("deploy")["exit_code"] == EXIT_USAGE


def test_gradcheck_exit_codes(runner):
    assert runner.execute("gradcheck", scope="ops", trials=2)["exit_code"] == EXIT_OK
    report = runner.execute("gradcheck", scope="ops", trials=2, inject_fault=True)
    assert report["exit_code"] == EXIT_GRADCHECK
    assert "injected_max_sign_flipped" in report["failed_cases"]


def test_curves_with_chart_output(runner, trained_run, tmp_path):
    report = runner.execute("curves", csv_paths=[str(trained_run / METRICS_FILE)], out=str(tmp_path / "plots" / "cmp.png"))
    assert report["exit_code"] == EXIT_OK
    assert (tmp_path / "plots" / "cmp.png").exists()
    merged = pd.read_csv(tmp_path / "plots" / "cmp.csv")
    assert list(merged.columns) == ["run"] + METRICS_COLUMNS
    assert runner.execute("curves", csv_paths=[], out=str(tmp_path / "empty.csv"))["exit_code"] == EXIT_USAGE


def write_manifest(tmp_path):
    (tmp_path / "tiny.ini").write_text(TINY_CONFIG)
    path = tmp_path / "manifest.ini"
    path.write_text(
        "[manifest]\noutput_dir = results\n\n"
        "[run.maxprop]\nconfig = tiny.ini\nseeds = 1, 2\nset = train.epochs=1\n\n"
        "[run.resnet]\nconfig = tiny.ini\nseeds = 1, 2\nset = train.epochs=1; network.combiner=addition\n"
    )
    return path


def test_manifest_training_then_ensemble(runner, tmp_path):
    manifest = write_manifest(tmp_path)
    assert runner.execute("ensemble", manifest=str(manifest))["exit_code"] == EXIT_IO

    report = runner.execute("train", manifest=str(manifest))
    assert report["exit_code"] == EXIT_OK
    assert len(report["runs"]) == 4
    assert set(report["summaries"]) == {"maxprop", "resnet"}
    assert report["comparisons"][0]["a"] == "maxprop"
    assert (tmp_path / "results" / "seed_results.csv").exists()
    assert (tmp_path / "results" / "resnet" / "seed2" / WEIGHTS_FILE).exists()

    ensemble = runner.execute("ensemble", manifest=str(manifest), voting="mean_prob")
    assert ensemble["exit_code"] == EXIT_OK
    assert ensemble["mix"] == "2M+2A"
    assert len(ensemble["members"]) == 4
    assert 0.0 <= ensemble["ensemble_accuracy"] <= 1.0


def test_cli_main(capsys, tmp_path):
    from main import main

    assert main(["gradcheck", "--scope", "ops", "--trials", "1"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["passed"] is True
    assert main(["train"]) == EXIT_USAGE
    with pytest.raises(SystemExit) as excinfo:
        main(["deploy"])
    assert excinfo.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as excinfo:
        main(["gradcheck", "--scope", "layers"])
    assert excinfo.value.code == EXIT_USAGE
