# maxprop/training.py
"""
Training loop for the small-dataset protocol (SGD with momentum and weight decay,
step learning-rate decay, shift augmentation), evaluation, the metrics CSV, and
seed-level summaries.
"""
import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import logsumexp

from .data import AugmentConfig, Dataset, augment, batches
from .errors import ConfigError
from .layers import ForwardContext, Module, Phase, softmax_cross_entropy
from .tensor import PRECISIONS, Rng, Tape, Tensor, resolve_dtype

logger = logging.getLogger(__name__)

# Rng(seed).fork(...) keys, so initialization and data order never share a stream.
INIT_STREAM = 0
DATA_STREAM = 1

METRICS_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr", "wall_seconds", "diverged"]


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings; defaults are the small-dataset protocol."""
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 100
    epochs: int = 100
    lr_step: int = 20
    lr_factor: float = 0.1
    seed: int = 0
    precision: str = "single"
    record_wall_time: bool = False
    divergence_threshold: float = 1e4

    def __post_init__(self):
        problems = []
        if not self.lr > 0:
            problems.append(f"lr must be > 0 (got {self.lr})")
        if not 0 <= self.momentum < 1:
            problems.append(f"momentum must lie in [0, 1) (got {self.momentum})")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0 (got {self.weight_decay})")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.epochs < 0:
            problems.append(f"epochs must be >= 0 (got {self.epochs})")
        if self.lr_step < 1:
            problems.append(f"lr_step must be >= 1 (got {self.lr_step})")
        if not 0 < self.lr_factor <= 1:
            problems.append(f"lr_factor must lie in (0, 1] (got {self.lr_factor})")
        if self.precision not in PRECISIONS:
            problems.append(f"precision must be one of {sorted(PRECISIONS)} (got {self.precision!r})")
        if not self.divergence_threshold > 0:
            problems.append(f"divergence_threshold must be > 0 (got {self.divergence_threshold})")
        if problems:
            raise ConfigError("Invalid training config: " + "; ".join(problems))


@dataclass
class RunRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    wall_seconds: float
    diverged: bool


class Evaluation(NamedTuple):
    loss: float
    top1: float
    topk: float


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """lr * lr_factor ** floor(epoch / lr_step)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr * cfg.lr_factor ** (epoch // cfg.lr_step)


def sgd_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    velocity: Dict[str, np.ndarray],
    cfg: TrainConfig,
    lr_now: float,
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray], bool]:
    """
    One momentum SGD step with L2 weight decay.

        g' = g + weight_decay * w;  v = momentum * v + g';  w = w - lr_now * v

    Returns:
        Tuple: (new params, new velocity, diverged). A non-finite gradient aborts
        the step and returns the inputs unchanged with diverged=True.
    """
    if set(params) != set(grads) or set(params) != set(velocity):
        raise ConfigError("sgd_step: params, grads and velocity must have the same names")
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise ConfigError(f"sgd_step: gradient for '{name}' has shape {grad.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            logger.warning(f"Non-finite gradient for '{name}', step aborted")
            return params, velocity, True
    new_params, new_velocity = {}, {}
    for name, weight in params.items():
        dtype = weight.dtype.type
        decayed = grads[name] + dtype(cfg.weight_decay) * weight
        v = dtype(cfg.momentum) * velocity[name] + decayed
        new_velocity[name] = v
        new_params[name] = weight if lr_now == 0 else weight - dtype(lr_now) * v
    return new_params, new_velocity, False


def _ranks(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Position of the true class in a stable descending sort (ties rank lower indices first).

    A row with any non-finite logit ranks last, so it never counts as a hit.
    """
    target = logits[np.arange(len(labels)), labels][:, None]
    higher = (logits > target).sum(axis=1)
    tied_before = ((logits == target) & (np.arange(logits.shape[1])[None, :] < labels[:, None])).sum(axis=1)
    ranks = higher + tied_before
    ranks[~np.isfinite(logits).all(axis=1)] = logits.shape[1]
    return ranks


def predict_logits(
    model: Module, dataset: Dataset, augment_cfg: Optional[AugmentConfig] = None, batch_size: int = 500
) -> np.ndarray:
    """Eval-phase logits for every image, in dataset order."""
    augment_cfg = augment_cfg or AugmentConfig.for_channels(dataset.channels)
    dtype = getattr(model, "dtype", np.float32)
    outputs = []
    for images, _ in batches(dataset, batch_size):
        x = Tensor._wrap(augment(images, augment_cfg, None, Phase.EVAL, dtype))
        outputs.append(model(x, ForwardContext(phase=Phase.EVAL)).data.astype(np.float64))
    return np.concatenate(outputs)


def evaluate(
    model: Module, dataset: Dataset, k: int = 5, augment_cfg: Optional[AugmentConfig] = None, batch_size: int = 500
) -> Evaluation:
    """
    Deterministic eval-phase pass.

    Returns:
        Evaluation: (mean cross-entropy, top-1 accuracy, top-k accuracy).
    """
    if not 1 <= k <= dataset.num_classes:
        raise ValueError(f"k must lie in [1, {dataset.num_classes}], got {k}")
    logits = predict_logits(model, dataset, augment_cfg, batch_size)
    labels = dataset.labels
    with np.errstate(invalid="ignore", over="ignore"):
        losses = logsumexp(logits, axis=1) - logits[np.arange(len(labels)), labels]
    ranks = _ranks(logits, labels)
    return Evaluation(float(np.mean(losses)), float(np.mean(ranks < 1)), float(np.mean(ranks < k)))


class Trainer:
    """
    Runs the full epoch loop for one model: augment, forward, loss, backward,
    sgd_step, then an eval-phase pass on the validation set.

    Args:
        config (TrainConfig): Optimizer, schedule and seed.
        augment_cfg (Optional[AugmentConfig]): Augmentation; defaults follow the
            training set's channel count.
        name (str): Prefix used in log lines.
    """

    def __init__(self, config: TrainConfig, augment_cfg: Optional[AugmentConfig] = None, name: str = "Trainer"):
        self.config = config
        self.augment_cfg = augment_cfg
        self.name = name
        logger.info(f"Initialized {self.name} (lr={config.lr}, epochs={config.epochs}, seed={config.seed})")

    def _check_compatible(self, model: Module, dataset: Dataset) -> None:
        num_classes = getattr(model, "num_classes", dataset.num_classes)
        if num_classes != dataset.num_classes:
            raise ConfigError(f"Model predicts {num_classes} classes but {dataset.name} has {dataset.num_classes}")
        spec = getattr(model, "spec", None)
        in_channels = getattr(spec, "in_channels", dataset.channels)
        if in_channels != dataset.channels:
            raise ConfigError(f"Model expects {in_channels} input channels but {dataset.name} has {dataset.channels}")

    def train(self, model: Module, ds_train: Dataset, ds_val: Optional[Dataset] = None) -> List[RunRecord]:
        cfg = self.config
        ds_val = ds_val or ds_train
        self._check_compatible(model, ds_train)
        self._check_compatible(model, ds_val)
        augment_cfg = self.augment_cfg or AugmentConfig.for_channels(ds_train.channels)
        dtype = resolve_dtype(cfg.precision)
        named = model.named_parameters()
        velocity = {name: np.zeros_like(p.value) for name, p in named.items()}
        data_rng = Rng(cfg.seed).fork(DATA_STREAM)
        records: List[RunRecord] = []

        for epoch in range(cfg.epochs):
            started = time.perf_counter()
            lr_now = lr_schedule(epoch, cfg)
            epoch_rng = data_rng.fork(epoch)
            order_rng, augment_rng = epoch_rng.fork(0), epoch_rng.fork(1)
            loss_sum, correct, seen = 0.0, 0, 0
            diverged = False

            for step, (images, labels) in enumerate(batches(ds_train, cfg.batch_size, order_rng, shuffle=True)):
                tape = Tape()
                ctx = ForwardContext(tape, Phase.TRAIN)
                x = Tensor._wrap(augment(images, augment_cfg, augment_rng, Phase.TRAIN, dtype))
                logits = model(x, ctx)
                loss = softmax_cross_entropy(logits, labels)
                value = loss.item()
                if not math.isfinite(value) or value > cfg.divergence_threshold:
                    logger.warning(f"{self.name}: loss {value} at epoch {epoch} step {step}, run diverged")
                    loss_sum, diverged = float("nan"), True
                    break
                tape.backward(loss)
                grads = ctx.gradients(named)
                params = {name: p.value for name, p in named.items()}
                params, velocity, diverged = sgd_step(params, grads, velocity, cfg, lr_now)
                if not diverged and not all(np.all(np.isfinite(w)) for w in params.values()):
                    logger.warning(f"{self.name}: non-finite parameters at epoch {epoch} step {step}, run diverged")
                    diverged = True
                for name, parameter in named.items():
                    parameter.value = params[name]
                loss_sum += value * len(labels)
                correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
                seen += len(labels)
                logger.debug(f"{self.name}: epoch {epoch} step {step} loss {value:.4f}")
                if diverged:
                    loss_sum = float("nan")
                    break

            train_acc = correct / seen if seen else 0.0
            if diverged:
                val = Evaluation(float("nan"), 0.0, 0.0)
                train_loss = float("nan")
            else:
                val = evaluate(model, ds_val, k=1, augment_cfg=augment_cfg)
                train_loss = loss_sum / seen
            wall = time.perf_counter() - started if cfg.record_wall_time else 0.0
            record = RunRecord(epoch, train_loss, train_acc, val.loss, val.top1, lr_now, wall, diverged)
            records.append(record)
            logger.info(
                f"{self.name}: epoch {epoch} lr={lr_now:g} train_loss={train_loss:.4f} train_acc={train_acc:.4f} "
                f"val_loss={val.loss:.4f} val_acc={val.top1:.4f}"
            )
            if diverged:
                break
        return records


def records_frame(records: Sequence[RunRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(record) for record in records], columns=METRICS_COLUMNS)
    frame["diverged"] = frame["diverged"].astype(int)
    return frame


def write_metrics(records: Sequence[RunRecord], path) -> None:
    """Writes ``epoch,train_loss,...,diverged`` rows; diverged as 0/1."""
    records_frame(records).to_csv(path, index=False)


def read_metrics(path) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != METRICS_COLUMNS:
        raise ConfigError(f"{path}: metrics columns {list(frame.columns)} do not match {METRICS_COLUMNS}")
    return frame


def summarize_seeds(values: Sequence[float]) -> Dict[str, Any]:
    """Mean and sample standard deviation (ddof=1; 0.0 for a single value)."""
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        raise ValueError("summarize_seeds needs at least one value")
    std = float(np.std(array, ddof=1)) if array.size > 1 else 0.0
    return {"n": int(array.size), "mean": float(np.mean(array)), "std": std, "values": array.tolist()}


def compare_runs(a: Sequence[float], b: Sequence[float]) -> Dict[str, float]:
    """Welch t-test of mean(a) - mean(b); t and p are NaN with fewer than two values per side."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t_stat, p_value = float("nan"), float("nan")
    if a.size > 1 and b.size > 1:
        result = stats.ttest_ind(a, b, equal_var=False)
        t_stat, p_value = float(result.statistic), float(result.pvalue)
    return {
        "mean_a": float(np.mean(a)),
        "mean_b": float(np.mean(b)),
        "difference": float(np.mean(a) - np.mean(b)),
        "t": t_stat,
        "p": p_value,
    }
