# maxprop/config.py
"""
Run configurations and experiment manifests as INI documents.

A run config has the sections [run], [dataset], [network] and [train]. Keys are
order-insensitive; unknown sections and keys are rejected by name. Every value
written by ``dump_run_config`` re-parses to the identical ``RunConfig``.

Manifest layout::

    [manifest]
    output_dir = runs
    workers = 2

    [run.maxprop]
    config = maxprop.ini
    seeds = 1, 2, 3
    set = train.epochs=10; network.bn_mode=frozen
"""
import configparser
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from .blocks import Activation, JteSpec, ModelSpec, NetworkSpec, PRESETS, Schedule
from .combiners import CombinerKind, CombinerType, MaxBackward
from .errors import CombinerError, ConfigError, SpecError
from .layers import BnMode
from .training import TrainConfig

logger = logging.getLogger(__name__)

DATASET_KINDS = ("fashion_mnist", "cifar10", "cifar100", "svhn_converted", "synthetic")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    # IDX files (fashion_mnist)
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    # CIFAR-style record files (cifar10, cifar100, svhn_converted)
    train_files: Tuple[str, ...] = ()
    test_files: Tuple[str, ...] = ()
    # 0 keeps every example
    train_subset: int = 0
    test_subset: int = 0
    synthetic_train: int = 1000
    synthetic_test: int = 200
    synthetic_classes: int = 10
    synthetic_channels: int = 3
    synthetic_size: int = 8
    synthetic_seed: int = 0
    max_shift: int = 4
    flip_horizontal: bool = False

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"Unknown dataset kind '{self.kind}', expected one of {list(DATASET_KINDS)}")
        if self.max_shift < 0 or self.train_subset < 0 or self.test_subset < 0:
            raise ConfigError("dataset.max_shift, train_subset and test_subset must be >= 0")

    @property
    def num_classes(self) -> int:
        return {"cifar100": 100, "synthetic": self.synthetic_classes}.get(self.kind, 10)

    @property
    def channels(self) -> int:
        return {"fashion_mnist": 1, "synthetic": self.synthetic_channels}.get(self.kind, 3)

    def paths(self) -> List[str]:
        if self.kind == "synthetic":
            return []
        if self.kind == "fashion_mnist":
            return [self.train_images, self.train_labels, self.test_images, self.test_labels]
        return list(self.train_files) + list(self.test_files)


@dataclass(frozen=True)
class NetworkConfig:
    preset: str = "resnet34"
    combiner: str = "addition"
    alpha: Optional[float] = None
    beta: Optional[float] = None
    max_backward: str = "max_only"
    activation: str = "relu"
    bn_mode: str = "learned"
    schedule: str = "uniform"
    jte: bool = False

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"Unknown network.preset '{self.preset}', expected one of {sorted(PRESETS)}")
        for key, enum in (("combiner", CombinerType), ("max_backward", MaxBackward), ("activation", Activation),
                          ("bn_mode", BnMode), ("schedule", Schedule)):
            value = getattr(self, key)
            if value not in {member.value for member in enum}:
                raise ConfigError(f"Invalid network.{key} '{value}', expected one of {[m.value for m in enum]}")
        try:
            self.combiner_kind()
        except CombinerError as e:
            raise ConfigError(f"Invalid combiner settings: {e}") from e

    def combiner_kind(self) -> CombinerKind:
        return CombinerKind(CombinerType(self.combiner), self.alpha, self.beta, MaxBackward(self.max_backward))

    def to_spec(self, in_channels: int, num_classes: int) -> ModelSpec:
        """Builds the network (or JTE) description for a dataset's shape."""
        try:
            base = NetworkSpec.preset(
                self.preset,
                in_channels,
                num_classes,
                self.combiner_kind(),
                Activation(self.activation),
                BnMode(self.bn_mode),
                Schedule(self.schedule),
            )
            if not self.jte:
                return base
            leaky = self.combiner_kind() if self.combiner == CombinerType.LEAKY_MAX.value else None
            return JteSpec.standard(base=base.with_combiner(CombinerKind.addition()), leaky=leaky,
                                    max_backward=MaxBackward(self.max_backward))
        except SpecError as e:
            raise ConfigError(f"Network config cannot be built: {e}") from e


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    output_dir: str = "runs/run"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))

    def model_spec(self) -> ModelSpec:
        return self.network.to_spec(self.dataset.channels, self.dataset.num_classes)


# --- value codecs ---

def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in configparser.ConfigParser.BOOLEAN_STATES:
        return configparser.ConfigParser.BOOLEAN_STATES[lowered]
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "none") else float(text)


def _parse_list(text: str) -> Tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(value)
    return str(value)


_PARSERS: Dict[type, Callable[[str], Any]] = {
    str: lambda text: text.strip(),
    int: int,
    float: float,
    bool: _parse_bool,
    tuple: _parse_list,
}


def _field_parsers(cls, skip: Sequence[str] = (), optional_floats: Sequence[str] = ()) -> Dict[str, Callable[[str], Any]]:
    """Value parser per field, chosen from the field's default value."""
    parsers = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        parsers[f.name] = _parse_optional_float if f.name in optional_floats else _PARSERS[type(f.default)]
    return parsers


RUN_KEYS = {"name": _PARSERS[str], "output_dir": _PARSERS[str], "seed": int}

SCHEMA: Dict[str, Dict[str, Callable[[str], Any]]] = {
    "run": RUN_KEYS,
    "dataset": _field_parsers(DatasetConfig),
    "network": _field_parsers(NetworkConfig, optional_floats=("alpha", "beta")),
    "train": _field_parsers(TrainConfig, skip=("seed",)),
}


def _new_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    return parser


def _read_parser(text: str, source: str) -> configparser.ConfigParser:
    parser = _new_parser()
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    return parser


def apply_overrides(parser: configparser.ConfigParser, overrides: Sequence[str]) -> None:
    """Applies ``section.key=value`` assignments on top of a parsed document."""
    for override in overrides:
        target, sep, value = override.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot or not key:
            raise ConfigError(f"Override '{override}' must look like section.key=value")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key.strip(), value.strip())


def _convert(parser: configparser.ConfigParser, source: str) -> Dict[str, Dict[str, Any]]:
    values: Dict[str, Dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}], expected one of {list(SCHEMA)}")
        schema = SCHEMA[section]
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"{source}: unknown key '{key}' in section [{section}]")
            try:
                values[section][key] = schema[key](raw)
            except ValueError as e:
                raise ConfigError(f"{source}: invalid value {raw!r} for {section}.{key}: {e}") from e
    return values


def parse_run_config(text: str, overrides: Sequence[str] = (), source: str = "<config>") -> RunConfig:
    """Parses a run config document; ``overrides`` are ``section.key=value`` strings."""
    parser = _read_parser(text, source)
    apply_overrides(parser, overrides)
    values = _convert(parser, source)
    run = values.get("run", {})
    seed = run.get("seed", 0)
    try:
        return RunConfig(
            name=run.get("name", "run"),
            output_dir=run.get("output_dir", f"runs/{run.get('name', 'run')}"),
            seed=seed,
            dataset=DatasetConfig(**values.get("dataset", {})),
            network=NetworkConfig(**values.get("network", {})),
            train=TrainConfig(seed=seed, **values.get("train", {})),
        )
    except (CombinerError, SpecError) as e:
        raise ConfigError(f"{source}: {e}") from e


def dump_run_config(cfg: RunConfig) -> str:
    """Serializes every resolved key, defaults included."""
    parser = _new_parser()
    parser["run"] = {"name": cfg.name, "output_dir": cfg.output_dir, "seed": str(cfg.seed)}
    for section, obj in (("dataset", cfg.dataset), ("network", cfg.network), ("train", cfg.train)):
        parser[section] = {key: _format(getattr(obj, key)) for key in SCHEMA[section]}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in parser.items(section))
        lines.append("")
    return "\n".join(lines)


def _resolve(path: str, base: Path) -> str:
    return path if not path or os.path.isabs(path) else str((base / path).resolve())


def load_run_config(
    path: os.PathLike,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
    check_paths: bool = True,
) -> RunConfig:
    """
    Reads a run config file, applies ``--set`` overrides, then ``--seed`` / ``--out``.
    Dataset paths are resolved relative to the config file and must exist.
    """
    path = Path(path)
    cfg = parse_run_config(path.read_text(encoding="utf-8"), overrides, source=str(path))
    dataset = cfg.dataset
    base = path.parent
    dataset = replace(
        dataset,
        train_images=_resolve(dataset.train_images, base),
        train_labels=_resolve(dataset.train_labels, base),
        test_images=_resolve(dataset.test_images, base),
        test_labels=_resolve(dataset.test_labels, base),
        train_files=tuple(_resolve(p, base) for p in dataset.train_files),
        test_files=tuple(_resolve(p, base) for p in dataset.test_files),
    )
    cfg = replace(cfg, dataset=dataset)
    if seed is not None:
        cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
    if output_dir is not None:
        cfg = replace(cfg, output_dir=output_dir)
    if check_paths:
        for dataset_path in dataset.paths():
            if not dataset_path:
                raise ConfigError(f"{path}: dataset kind '{dataset.kind}' needs every file path set")
            if not os.path.exists(dataset_path):
                raise FileNotFoundError(f"{path}: dataset file not found: {dataset_path}")
    logger.info(f"Loaded run config '{cfg.name}' from {path} (seed {cfg.seed}, output {cfg.output_dir})")
    return cfg


@dataclass(frozen=True)
class ManifestRun:
    name: str
    config: str
    seeds: Tuple[int, ...]
    overrides: Tuple[str, ...] = ()


@dataclass(frozen=True)
class ExperimentManifest:
    output_dir: str
    workers: int
    runs: Tuple[ManifestRun, ...]

    def __post_init__(self):
        names = [run.name for run in self.runs]
        if len(set(names)) != len(names):
            raise ConfigError(f"Manifest run names must be unique, got {names}")
        if not self.runs:
            raise ConfigError("Manifest lists no runs")
        if self.workers < 1:
            raise ConfigError(f"manifest.workers must be >= 1, got {self.workers}")

    def run_dir(self, run: ManifestRun, seed: int) -> str:
        return str(Path(self.output_dir) / run.name / f"seed{seed}")

    def load(self, run: ManifestRun, seed: int, extra_overrides: Sequence[str] = ()) -> RunConfig:
        overrides = tuple(run.overrides) + tuple(extra_overrides)
        cfg = load_run_config(run.config, overrides, seed=seed, output_dir=self.run_dir(run, seed))
        return replace(cfg, name=run.name)


def parse_manifest(path: os.PathLike) -> ExperimentManifest:
    path = Path(path)
    parser = _read_parser(path.read_text(encoding="utf-8"), str(path))
    if not parser.has_section("manifest"):
        raise ConfigError(f"{path}: missing [manifest] section")
    header = dict(parser.items("manifest"))
    unknown = set(header) - {"output_dir", "workers"}
    if unknown:
        raise ConfigError(f"{path}: unknown key '{sorted(unknown)[0]}' in section [manifest]")
    runs = []
    for section in parser.sections():
        if section == "manifest":
            continue
        if not section.startswith("run."):
            raise ConfigError(f"{path}: unknown section [{section}], expected [manifest] or [run.<name>]")
        entry = dict(parser.items(section))
        unknown = set(entry) - {"config", "seeds", "set"}
        if unknown:
            raise ConfigError(f"{path}: unknown key '{sorted(unknown)[0]}' in section [{section}]")
        if "config" not in entry:
            raise ConfigError(f"{path}: section [{section}] needs a 'config' key")
        try:
            seeds = tuple(int(seed) for seed in _parse_list(entry.get("seeds", "0")))
        except ValueError as e:
            raise ConfigError(f"{path}: invalid seeds in [{section}]: {e}") from e
        overrides = tuple(part.strip() for part in entry.get("set", "").split(";") if part.strip())
        runs.append(ManifestRun(section[len("run."):], _resolve(entry["config"], path.parent), seeds, overrides))
    try:
        workers = int(header.get("workers", "1"))
    except ValueError as e:
        raise ConfigError(f"{path}: invalid manifest.workers: {e}") from e
    output_dir = _resolve(header.get("output_dir", "runs"), path.parent)
    return ExperimentManifest(output_dir, workers, tuple(runs))
