# maxprop/__init__.py

from .blocks import (
    Activation,
    BlockSpec,
    BodyType,
    JteSpec,
    NetworkSpec,
    Schedule,
    StageSpec,
    build_block,
    build_jte,
    build_model,
    build_network,
)
from .combiners import CombinerKind, CombinerType, MaxBackward, combine, combine_backward
from .commands import ExperimentRunner
from .config import ExperimentManifest, RunConfig, load_run_config, parse_manifest, parse_run_config
from .data import AugmentConfig, Dataset, augment, batches, load_cifar_binary, load_idx, synthetic_dataset
from .ensemble import EnsembleEvaluator, EnsembleSpec, Voting, ensemble_predict, majority_vote
from .errors import MaxPropError
from .gradcheck import GradientChecker, grad_check
from .layers import BnMode, Phase
from .tensor import Rng, Tape, Tensor
from .training import RunRecord, TrainConfig, Trainer, evaluate, lr_schedule, sgd_step
from .weights import load_weights, save_weights

__all__ = [
    "Activation",
    "AugmentConfig",
    "BlockSpec",
    "BnMode",
    "BodyType",
    "CombinerKind",
    "CombinerType",
    "Dataset",
    "EnsembleEvaluator",
    "EnsembleSpec",
    "ExperimentManifest",
    "ExperimentRunner",
    "GradientChecker",
    "JteSpec",
    "MaxBackward",
    "MaxPropError",
    "NetworkSpec",
    "Phase",
    "Rng",
    "RunConfig",
    "RunRecord",
    "Schedule",
    "StageSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "Voting",
    "augment",
    "batches",
    "build_block",
    "build_jte",
    "build_model",
    "build_network",
    "combine",
    "combine_backward",
    "ensemble_predict",
    "evaluate",
    "grad_check",
    "load_cifar_binary",
    "load_idx",
    "load_run_config",
    "load_weights",
    "lr_schedule",
    "majority_vote",
    "parse_manifest",
    "parse_run_config",
    "save_weights",
    "sgd_step",
    "synthetic_dataset",
]
