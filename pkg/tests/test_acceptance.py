"""
Scaled-down experiments. Marked slow; the FashionMNIST ones also need the
original IDX files in FASHION_MNIST_DIR.
"""
import numpy as np
import pytest

from maxprop.blocks import Activation, NetworkSpec, build_network
from maxprop.combiners import CombinerKind
from maxprop.commands import train_run
from maxprop.config import parse_run_config
from maxprop.data import AugmentConfig, Dataset, synthetic_dataset
from maxprop.gradcheck import GradientChecker
from maxprop.layers import BnMode
from maxprop.tensor import Rng
from maxprop.training import TrainConfig, Trainer, summarize_seeds

SEEDS = (1, 2, 3)


def idx_file(root, stem):
    for candidate in (root / stem, root / f"{stem}.gz"):
        if candidate.exists():
            return str(candidate)
    pytest.skip(f"{stem} not found in {root}")


def fashion_config(root, out, seed, combiner, extra=""):
    return (
        f"[run]\nname = fashion_{combiner}\noutput_dir = {out}\nseed = {seed}\n"
        "[dataset]\nkind = fashion_mnist\n"
        f"train_images = {idx_file(root, 'train-images-idx3-ubyte')}\n"
        f"train_labels = {idx_file(root, 'train-labels-idx1-ubyte')}\n"
        f"test_images = {idx_file(root, 't10k-images-idx3-ubyte')}\n"
        f"test_labels = {idx_file(root, 't10k-labels-idx1-ubyte')}\n"
        "train_subset = 10000\n"
        f"[network]\npreset = small\ncombiner = {combiner}\n{extra}"
        "[train]\nepochs = 10\n"
    )


@pytest.mark.slow
def test_full_gradient_oracle_suite():
    report = GradientChecker(trials=100, seed=0).run()
    assert report["passed"], report["failed_cases"]
    assert all(case["trials"] >= 100 for case in report["cases"])


@pytest.mark.slow
@pytest.mark.dataset
def test_no_activation_addition_fails_where_maximum_trains(fashion_mnist_dir, tmp_path):
    for seed in SEEDS:
        results = {}
        for combiner in ("addition", "maximum"):
            text = fashion_config(fashion_mnist_dir, tmp_path / combiner / str(seed), seed, combiner,
                                  "activation = none\n")
            results[combiner] = train_run(parse_run_config(text))
        addition, maximum = results["addition"], results["maximum"]
        assert addition["diverged"] or addition["val_acc"] < 0.2
        assert not maximum["diverged"] and maximum["val_acc"] >= 0.85


@pytest.mark.slow
@pytest.mark.dataset
def test_frozen_bn_maximum_is_not_worse_than_addition(fashion_mnist_dir, tmp_path):
    accuracies = {"addition": [], "maximum": []}
    for combiner in accuracies:
        for seed in SEEDS:
            text = fashion_config(fashion_mnist_dir, tmp_path / combiner / str(seed), seed, combiner,
                                  "bn_mode = frozen\n") + "lr = 0.01\n"
            result = train_run(parse_run_config(text))
            accuracies[combiner].append(0.0 if result["diverged"] else result["val_acc"])
    maximum, addition = summarize_seeds(accuracies["maximum"]), summarize_seeds(accuracies["addition"])
    assert maximum["mean"] - addition["mean"] >= 0, accuracies
    assert np.all(np.isfinite(maximum["values"]))


NO_SHIFT = AugmentConfig(max_shift=0)


def level_dataset(n: int, seed: int) -> Dataset:
    """Flat grey images at a low, middle or high level; label 1 marks the two extremes."""
    rng = np.random.default_rng(seed)
    level_index = np.array([0, 1, 2, 1])[np.arange(n) % 4]  # low, middle, high, middle
    levels = np.array([40.0, 128.0, 216.0])[level_index]
    pixels = levels[:, None, None, None] + rng.uniform(-4.0, 4.0, (n, 3, 8, 8))
    labels = (level_index != 1).astype(np.int64)
    return Dataset(np.clip(np.rint(pixels), 0, 255).astype(np.uint8), labels, 2, "levels")


def train_small(kind, seed, train, val, cfg, **spec_options):
    spec = NetworkSpec.preset("small", train.channels, train.num_classes, kind, **spec_options)
    model = build_network(spec, Rng(seed).fork(0))
    records = Trainer(cfg, NO_SHIFT).train(model, train, val)
    return 0.0 if records[-1].diverged else records[-1].val_acc


@pytest.mark.slow
def test_no_activation_addition_is_capped_where_maximum_is_not():
    # Without activations an addition network is affine in its input, so it
    # cannot put both extremes on the same side of one threshold.
    train, val = level_dataset(240, seed=0), level_dataset(120, seed=1)
    accuracies = {"addition": [], "maximum": []}
    for seed in SEEDS:
        cfg = TrainConfig(lr=0.05, batch_size=20, epochs=10, seed=seed)
        for name, kind in (("addition", CombinerKind.addition()), ("maximum", CombinerKind.maximum())):
            accuracies[name].append(train_small(kind, seed, train, val, cfg, activation=Activation.NONE))
    assert max(accuracies["addition"]) <= 0.85, accuracies
    assert max(accuracies["maximum"]) >= 0.9, accuracies
    assert np.mean(accuracies["maximum"]) > np.mean(accuracies["addition"]), accuracies


@pytest.mark.slow
def test_frozen_bn_maximum_keeps_up_with_addition_on_synthetic_task():
    train = synthetic_dataset(400, 4, seed=0)
    val = synthetic_dataset(100, 4, seed=1)
    accuracies = {"addition": [], "maximum": []}
    for seed in SEEDS:
        cfg = TrainConfig(lr=0.01, batch_size=25, epochs=8, seed=seed)
        for name, kind in (("addition", CombinerKind.addition()), ("maximum", CombinerKind.maximum())):
            accuracies[name].append(train_small(kind, seed, train, val, cfg, bn_mode=BnMode.FROZEN))
    maximum, addition = summarize_seeds(accuracies["maximum"]), summarize_seeds(accuracies["addition"])
    assert maximum["mean"] >= addition["mean"] - 0.05, accuracies
    assert np.all(np.isfinite(maximum["values"]))
