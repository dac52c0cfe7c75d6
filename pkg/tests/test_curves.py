import logging

import pandas as pd
import pytest

from maxprop.curves import merge_curves, plot_curves, run_label, write_curves
from maxprop.errors import ConfigError
from maxprop.training import METRICS_COLUMNS, RunRecord, write_metrics


def write_run(root, name, epochs, acc=0.5):
    path = root / name / "seed1" / "metrics.csv"
    path.parent.mkdir(parents=True)
    write_metrics([RunRecord(e, 1.0 / (e + 1), acc, 1.2 / (e + 1), acc, 0.1, 0.0, False) for e in range(epochs)], path)
    return path


def test_run_label():
    assert run_label("runs/maxprop/seed1/metrics.csv") == "maxprop/seed1"
    assert run_label("exports/baseline.csv") == "baseline"


def test_merge_stacks_runs_with_run_column(tmp_path):
    a = write_run(tmp_path, "resnet", 3, 0.6)
    b = write_run(tmp_path, "maxprop", 3, 0.7)
    frame = merge_curves([a, b])
    assert list(frame.columns) == ["run"] + METRICS_COLUMNS
    assert frame["run"].tolist() == ["resnet/seed1"] * 3 + ["maxprop/seed1"] * 3
    assert frame.loc[frame["run"] == "maxprop/seed1", "val_acc"].tolist() == [0.7, 0.7, 0.7]


def test_merge_needs_input():
    with pytest.raises(ConfigError):
        merge_curves([])


def test_misaligned_epochs_are_padded_with_warning(tmp_path, caplog):
    long_run = write_run(tmp_path, "long", 4)
    short_run = write_run(tmp_path, "short", 2)
    with caplog.at_level(logging.WARNING, logger="maxprop.curves"):
        frame = merge_curves([long_run, short_run])
    assert "short/seed1" in caplog.text
    short = frame[frame["run"] == "short/seed1"]
    assert short["epoch"].tolist() == [0, 1, 2, 3]
    assert short["val_loss"].isna().tolist() == [False, False, True, True]


def test_duplicate_labels_are_disambiguated(tmp_path):
    path = write_run(tmp_path, "same", 2)
    frame = merge_curves([path, path])
    assert frame["run"].nunique() == 2


def test_write_and_plot(tmp_path):
    frame = merge_curves([write_run(tmp_path, "a", 3), write_run(tmp_path, "b", 2)])
    csv_path = tmp_path / "curves.csv"
    write_curves(frame, csv_path)
    reread = pd.read_csv(csv_path)
    assert len(reread) == 6
    chart = tmp_path / "curves.png"
    plot_curves(frame, chart)
    assert chart.stat().st_size > 0
