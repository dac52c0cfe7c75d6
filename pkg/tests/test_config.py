import os
from pathlib import Path

import pytest

from maxprop.blocks import JteSpec, NetworkSpec
from maxprop.combiners import CombinerType
from maxprop.config import (
    DatasetConfig,
    NetworkConfig,
    RunConfig,
    dump_run_config,
    load_run_config,
    parse_manifest,
    parse_run_config,
)
from maxprop.errors import ConfigError
from maxprop.training import TrainConfig

from conftest import TINY_CONFIG


def test_defaults_follow_training_protocol():
    cfg = parse_run_config("")
    assert cfg == RunConfig()
    assert cfg.train == TrainConfig()
    assert cfg.dataset.max_shift == 4
    assert cfg.network.preset == "resnet34" and cfg.network.bn_mode == "learned"


def test_dump_then_parse_reproduces_config():
    cfg = parse_run_config(TINY_CONFIG)
    assert parse_run_config(dump_run_config(cfg)) == cfg

    detailed = parse_run_config(
        "[dataset]\nkind = cifar10\ntrain_files = a.bin, b.bin\ntest_files = t.bin\ntrain_subset = 500\n"
        "[network]\ncombiner = leaky_max\nalpha = 0.7\nbeta = 0.3\njte = true\n"
        "[train]\nlr = 0.025\nrecord_wall_time = yes\n"
    )
    assert detailed.dataset.train_files == ("a.bin", "b.bin")
    assert detailed.network.alpha == 0.7
    assert detailed.train.record_wall_time is True
    assert parse_run_config(dump_run_config(detailed)) == detailed


def test_key_order_does_not_matter():
    a = parse_run_config("[train]\nlr = 0.2\nepochs = 3\n[run]\nseed = 4\n")
    b = parse_run_config("[run]\nseed = 4\n[train]\nepochs = 3\nlr = 0.2\n")
    assert a == b


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="laerning_rate"):
        parse_run_config("[train]\nlaerning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="optimizer"):
        parse_run_config("[optimizer]\nlr = 0.1\n")


def test_invalid_values():
    with pytest.raises(ConfigError, match="train.lr"):
        parse_run_config("[train]\nlr = fast\n")
    with pytest.raises(ConfigError):
        parse_run_config("[train]\nlr = 0\n")
    with pytest.raises(ConfigError, match="bn_mode"):
        parse_run_config("[network]\nbn_mode = sometimes\n")
    with pytest.raises(ConfigError, match="kind"):
        parse_run_config("[dataset]\nkind = imagenet\n")


def test_leaky_weights_only_for_leaky_max():
    with pytest.raises(ConfigError):
        parse_run_config("[network]\ncombiner = maximum\nalpha = 0.5\n")
    with pytest.raises(ConfigError):
        parse_run_config("[network]\ncombiner = leaky_max\nalpha = 0\nbeta = 0\n")


def test_overrides_apply_after_file():
    cfg = parse_run_config(TINY_CONFIG, ["train.epochs=7", "network.combiner = leaky_max"])
    assert cfg.train.epochs == 7
    assert cfg.network.combiner_kind().kind == CombinerType.LEAKY_MAX
    with pytest.raises(ConfigError, match="section.key=value"):
        parse_run_config(TINY_CONFIG, ["epochs=7"])
    with pytest.raises(ConfigError, match="epochz"):
        parse_run_config(TINY_CONFIG, ["train.epochz=7"])


def test_run_seed_drives_training_seed():
    cfg = parse_run_config("[run]\nseed = 5\n")
    assert cfg.train.seed == 5


def test_model_spec_from_dataset_shape():
    spec = parse_run_config(TINY_CONFIG).model_spec()
    assert isinstance(spec, NetworkSpec)
    assert (spec.in_channels, spec.num_classes) == (3, 3)
    jte = parse_run_config(TINY_CONFIG, ["network.jte=true"]).model_spec()
    assert isinstance(jte, JteSpec)
    assert [branch.combiner.code for branch in jte.branches] == ["A", "M", "LM"]
    assert {branch.name for branch in jte.branches} == {"tiny"}
    assert DatasetConfig(kind="fashion_mnist").channels == 1
    assert DatasetConfig(kind="cifar100").num_classes == 100


def test_network_config_rejects_unbuildable_geometry():
    with pytest.raises(ConfigError):
        NetworkConfig(preset="resnet50", activation="none").to_spec(3, 10)


def test_load_run_config_resolves_paths_and_cli_flags(tmp_path, tiny_config_path):
    cfg = load_run_config(tiny_config_path, ["train.epochs=1"], seed=9, output_dir=str(tmp_path / "out"))
    assert cfg.seed == 9 and cfg.train.seed == 9
    assert cfg.train.epochs == 1
    assert cfg.output_dir == str(tmp_path / "out")

    (tmp_path / "data").mkdir()
    for name in ("a", "b", "c", "d"):
        (tmp_path / "data" / name).write_bytes(b"")
    config = tmp_path / "fashion.ini"
    config.write_text("[dataset]\nkind = fashion_mnist\ntrain_images = data/a\ntrain_labels = data/b\n"
                      "test_images = data/c\ntest_labels = data/d\n")
    loaded = load_run_config(config)
    assert Path(loaded.dataset.train_images) == (tmp_path / "data" / "a").resolve()


def test_written_snapshot_reloads_from_its_own_directory(tmp_path):
    (tmp_path / "data").mkdir()
    for name in ("a", "b", "c", "d"):
        (tmp_path / "data" / name).write_bytes(b"")
    (tmp_path / "configs").mkdir()
    config = tmp_path / "configs" / "fashion.ini"
    config.write_text("[dataset]\nkind = fashion_mnist\ntrain_images = ../data/a\ntrain_labels = ../data/b\n"
                      "test_images = ../data/c\ntest_labels = ../data/d\n")
    loaded = load_run_config(config)
    assert os.path.isabs(loaded.dataset.test_labels)

    snapshot = tmp_path / "runs" / "f" / "resolved_config.ini"
    snapshot.parent.mkdir(parents=True)
    snapshot.write_text(dump_run_config(loaded))
    reloaded = load_run_config(snapshot)
    assert reloaded.dataset == loaded.dataset
    assert Path(reloaded.dataset.train_images) == (tmp_path / "data" / "a").resolve()


def test_missing_dataset_file(tmp_path):
    config = tmp_path / "fashion.ini"
    config.write_text("[dataset]\nkind = fashion_mnist\ntrain_images = nope\ntrain_labels = nope\n"
                      "test_images = nope\ntest_labels = nope\n")
    with pytest.raises(FileNotFoundError, match="nope"):
        load_run_config(config)
    config.write_text("[dataset]\nkind = fashion_mnist\n")
    with pytest.raises(ConfigError):
        load_run_config(config)


def write_manifest(tmp_path, body: str) -> Path:
    (tmp_path / "tiny.ini").write_text(TINY_CONFIG)
    path = tmp_path / "manifest.ini"
    path.write_text(body)
    return path


def test_parse_manifest(tmp_path):
    path = write_manifest(tmp_path, (
        "[manifest]\noutput_dir = results\nworkers = 2\n\n"
        "[run.maxprop]\nconfig = tiny.ini\nseeds = 1, 2, 3\nset = train.epochs=1; network.bn_mode=frozen\n\n"
        "[run.resnet]\nconfig = tiny.ini\nset = network.combiner=addition\n"
    ))
    manifest = parse_manifest(path)
    assert manifest.workers == 2
    assert [run.name for run in manifest.runs] == ["maxprop", "resnet"]
    maxprop, resnet = manifest.runs
    assert maxprop.seeds == (1, 2, 3) and resnet.seeds == (0,)
    assert maxprop.overrides == ("train.epochs=1", "network.bn_mode=frozen")
    cfg = manifest.load(maxprop, 2)
    assert cfg.name == "maxprop" and cfg.seed == 2
    assert cfg.network.bn_mode == "frozen" and cfg.train.epochs == 1
    assert Path(cfg.output_dir) == tmp_path / "results" / "maxprop" / "seed2"


@pytest.mark.parametrize("body", [
    "[run.a]\nconfig = tiny.ini\n",
    "[manifest]\n[run.a]\nconfig = tiny.ini\n[run.a]\nconfig = tiny.ini\n",
    "[manifest]\n[run.a]\nseeds = 1\n",
    "[manifest]\n[run.a]\nconfig = tiny.ini\nseeds = one\n",
    "[manifest]\n[experiment]\nconfig = tiny.ini\n",
    "[manifest]\nworkers = 0\n[run.a]\nconfig = tiny.ini\n",
    "[manifest]\n",
])
def test_invalid_manifests(tmp_path, body):
    with pytest.raises(ConfigError):
        parse_manifest(write_manifest(tmp_path, body))


CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.mark.parametrize("name", ["synthetic_tiny.ini", "fashion_mnist_no_activation.ini", "cifar10_resnet34.ini"])
def test_shipped_configs_parse(name):
    cfg = load_run_config(CONFIG_DIR / name, check_paths=False)
    assert cfg.seed == 1
    assert cfg.model_spec().num_classes == cfg.dataset.num_classes


def test_shipped_manifest_parses():
    manifest = parse_manifest(CONFIG_DIR / "combiners_manifest.ini")
    assert [run.name for run in manifest.runs] == ["addition", "maximum", "leaky_max"]
    assert manifest.load(manifest.runs[2], 3).network.combiner == "leaky_max"
