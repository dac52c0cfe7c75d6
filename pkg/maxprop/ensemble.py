# maxprop/ensemble.py
"""Voting ensembles over independently trained members (plain networks or JTE models)."""
import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax
from sklearn.metrics import accuracy_score

from .blocks import JteSpec, ModelSpec, NetworkSpec, Schedule
from .data import AugmentConfig, Dataset
from .errors import SpecError
from .layers import Module
from .training import predict_logits

logger = logging.getLogger(__name__)


class Voting(str, Enum):
    MAJORITY = "majority"
    MEAN_PROB = "mean_prob"


def member_code(spec: ModelSpec) -> str:
    """Short label of a member's architecture: A, M, LM, C, ALT or JTE."""
    if isinstance(spec, JteSpec):
        return "JTE"
    if spec.schedule == Schedule.ALTERNATING:
        return "ALT"
    return spec.combiner.code


@dataclass(frozen=True)
class EnsembleMember:
    spec: ModelSpec
    seed: int
    name: str = ""

    @property
    def code(self) -> str:
        return member_code(self.spec)


@dataclass(frozen=True)
class EnsembleSpec:
    members: Tuple[EnsembleMember, ...]
    voting: Voting = Voting.MAJORITY

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "voting", Voting(self.voting))
        if not self.members:
            raise SpecError("An ensemble needs at least one member")
        classes = {member.spec.num_classes for member in self.members}
        if len(classes) != 1:
            raise SpecError(f"Ensemble members disagree on the number of classes: {sorted(classes)}")

    @property
    def num_classes(self) -> int:
        return self.members[0].spec.num_classes

    @property
    def mix(self) -> str:
        """Member mix such as '2A+2M+2LM', in order of first appearance."""
        counts = Counter(member.code for member in self.members)
        return "+".join(f"{count}{code}" for code, count in counts.items())


def majority_vote(predictions: np.ndarray, num_classes: int) -> np.ndarray:
    """
    Per-sample modal class of ``predictions`` (members x samples).

    Ties go to the lowest class index among the tied classes. A vote of -1
    abstains, and a sample nobody votes for predicts -1.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    if predictions.ndim != 2 or predictions.shape[0] == 0:
        raise SpecError(f"majority_vote expects a non-empty members x samples array, got shape {predictions.shape}")
    counts = np.zeros((predictions.shape[1], num_classes), dtype=np.int64)
    samples = np.arange(predictions.shape[1])
    for votes in predictions:
        voted = votes >= 0
        np.add.at(counts, (samples[voted], votes[voted]), 1)
    winners = np.argmax(counts, axis=1)
    winners[counts.sum(axis=1) == 0] = -1
    return winners


def mean_prob_vote(logits: Sequence[np.ndarray]) -> np.ndarray:
    """argmax of the member-averaged softmax probabilities; rows with a non-finite logit add nothing."""
    if len(logits) == 0:
        raise SpecError("mean_prob_vote needs at least one member")
    summed = 0.0
    for member in logits:
        member = np.asarray(member, dtype=np.float64)
        finite = np.isfinite(member).all(axis=1)
        with np.errstate(invalid="ignore", over="ignore"):
            probabilities = softmax(member, axis=1)
        summed = summed + np.where(finite[:, None], probabilities, 0.0)
    winners = np.argmax(summed, axis=1)
    winners[~(summed > 0).any(axis=1)] = -1
    return winners


def member_predictions(logits: np.ndarray) -> np.ndarray:
    """Top-1 class per row, or -1 where a logit is non-finite."""
    logits = np.asarray(logits)
    predictions = np.argmax(logits, axis=1)
    predictions[~np.isfinite(logits).all(axis=1)] = -1
    return predictions


def ensemble_predict(
    spec: EnsembleSpec,
    models: Sequence[Module],
    dataset: Dataset,
    augment_cfg: Optional[AugmentConfig] = None,
    member_logits: Optional[List[np.ndarray]] = None,
) -> np.ndarray:
    """Class predictions of the ensemble for every image of ``dataset``."""
    if not models:
        raise SpecError("ensemble_predict needs at least one model")
    if len(models) != len(spec.members):
        raise SpecError(f"Ensemble spec lists {len(spec.members)} members but {len(models)} models were given")
    logits = member_logits if member_logits is not None else [predict_logits(model, dataset, augment_cfg) for model in models]
    if spec.voting == Voting.MEAN_PROB:
        return mean_prob_vote(logits)
    return majority_vote(np.stack([member_predictions(member) for member in logits]), spec.num_classes)


class EnsembleEvaluator:
    """Scores every member and the combined vote on one dataset."""

    def __init__(self, name: str = "EnsembleEvaluator"):
        self.name = name
        logger.info(f"Initialized {self.name}")

    def evaluate(
        self,
        spec: EnsembleSpec,
        models: Sequence[Module],
        dataset: Dataset,
        augment_cfg: Optional[AugmentConfig] = None,
    ) -> Dict[str, Any]:
        """
        Args:
            spec (EnsembleSpec): Members and voting rule.
            models (Sequence[Module]): Built models with loaded weights, in member order.
            dataset (Dataset): Evaluation set.
            augment_cfg (Optional[AugmentConfig]): Normalization settings.

        Returns:
            Dict[str, Any]: Report with per-member accuracy, the mix label and the ensemble accuracy.
        """
        logger.info(f"{self.name}: evaluating {len(models)} members ({spec.mix}, {spec.voting.value}) on {dataset.name}")
        try:
            logits = [predict_logits(model, dataset, augment_cfg) for model in models]
            members = []
            for member, member_logits in zip(spec.members, logits):
                accuracy = float(accuracy_score(dataset.labels, member_predictions(member_logits)))
                members.append({"name": member.name, "code": member.code, "seed": member.seed, "accuracy": accuracy})
                logger.info(f"{self.name}: member {member.name or member.code} seed {member.seed} accuracy {accuracy:.4f}")
            predictions = ensemble_predict(spec, models, dataset, augment_cfg, member_logits=logits)
            accuracy = float(accuracy_score(dataset.labels, predictions))
            logger.info(f"{self.name}: ensemble accuracy {accuracy:.4f}")
            return {
                "source": self.name,
                "type": "ensemble_report",
                "dataset": dataset.name,
                "voting": spec.voting.value,
                "mix": spec.mix,
                "members": members,
                "ensemble_accuracy": accuracy,
            }
        except Exception as e:
            logger.error(f"{self.name}: ensemble evaluation failed: {e}", exc_info=True)
            return {"source": self.name, "type": "ensemble_report", "error": str(e), "exception": e}
