# maxprop/curves.py
"""Merges per-run metrics CSVs into one long-format table and renders comparison charts."""
import logging
import os
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from .errors import ConfigError
from .training import METRICS_COLUMNS, read_metrics

logger = logging.getLogger(__name__)


def run_label(path: os.PathLike) -> str:
    """'runs/maxprop/seed1/metrics.csv' -> 'maxprop/seed1'; other file names use their stem."""
    path = Path(path)
    if path.stem != "metrics":
        return path.stem
    parts = path.parent.parts[-2:]
    return "/".join(parts) if parts else path.stem


def merge_curves(csv_paths: Sequence[os.PathLike], names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    Stacks metrics files into columns ``run`` + the metrics schema.

    Runs covering different epochs are padded to the union of epochs with blank
    cells, and a warning is logged.
    """
    if not csv_paths:
        raise ConfigError("curves needs at least one metrics CSV")
    labels: List[str] = list(names) if names else [run_label(p) for p in csv_paths]
    if len(labels) != len(csv_paths):
        raise ConfigError(f"Got {len(labels)} run names for {len(csv_paths)} files")
    seen = {}
    for index, label in enumerate(labels):
        if label in seen:
            labels[index] = f"{label}#{index}"
        seen[label] = index

    frames = [read_metrics(path) for path in csv_paths]
    epochs = sorted(set().union(*(frame["epoch"].tolist() for frame in frames)))
    merged = []
    for label, frame in zip(labels, frames):
        if frame["epoch"].tolist() != epochs:
            logger.warning(f"Run '{label}' covers {len(frame)} of {len(epochs)} epochs; missing epochs left blank")
        aligned = frame.set_index("epoch").reindex(epochs).reset_index()
        aligned.insert(0, "run", label)
        merged.append(aligned)
    result = pd.concat(merged, ignore_index=True)[["run"] + METRICS_COLUMNS]
    result["epoch"] = result["epoch"].astype(int)
    result["diverged"] = result["diverged"].astype("Int64")
    return result


def write_curves(frame: pd.DataFrame, path: os.PathLike) -> None:
    frame.to_csv(path, index=False, na_rep="")
    logger.info(f"Wrote merged curves for {frame['run'].nunique()} runs to {path}")


def plot_curves(frame: pd.DataFrame, path: os.PathLike) -> None:
    """Validation loss (solid) and accuracy (dashed) per run against epoch."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (loss_ax, acc_ax) = plt.subplots(1, 2, figsize=(11, 4))
    for label, run in frame.groupby("run", sort=False):
        loss_ax.plot(run["epoch"], run["val_loss"], linestyle="-", label=label)
        acc_ax.plot(run["epoch"], run["val_acc"], linestyle="--", label=label)
    loss_ax.set_xlabel("epoch")
    loss_ax.set_ylabel("val_loss")
    acc_ax.set_xlabel("epoch")
    acc_ax.set_ylabel("val_acc")
    acc_ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info(f"Rendered curves chart to {path}")
