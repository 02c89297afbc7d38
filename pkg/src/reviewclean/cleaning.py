"""Dataset cleaning: retain predicted-valid instances, draw size-matched
controlled samples, and measure the valid-comment ratio improvement."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .corpus import Dataset
from .metrics import NOISY, VALID

ERROR_LABEL = "error"


class CleaningError(Exception):
    pass


class MissingPrediction(CleaningError):
    def __init__(self, instance_id: str):
        super().__init__(f"no prediction for instance {instance_id!r}")
        self.instance_id = instance_id


class TargetTooLarge(CleaningError):
    pass


class EmptyPredictedValid(CleaningError):
    pass


@dataclass
class CleanReport:
    input_size: int
    retained: int
    removed: int
    retained_ratio: float
    per_split: dict  # split -> {"input": n, "retained": n}
    provenance: dict = field(default_factory=dict)
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "retained": self.retained,
            "removed": self.removed,
            "retained_ratio": self.retained_ratio,
            "per_split": {k: dict(v) for k, v in sorted(self.per_split.items())},
            "provenance": dict(self.provenance),
            "seed": self.seed,
        }


def _labels_by_id(predictions) -> Mapping[str, str]:
    if isinstance(predictions, Mapping):
        return predictions
    return {p.instance_id: p.label for p in predictions}


def apply_clean(
    dataset: Dataset,
    predictions,
    treat_errors_as: str = NOISY,
    provenance: Optional[Mapping[str, str]] = None,
):
    """Retain exactly the instances predicted valid, preserving order.

    ``predictions`` is a mapping of id to label or a sequence of gateway
    predictions covering every instance; a gap raises
    :class:`MissingPrediction`. Error-marked predictions count as
    ``treat_errors_as`` (noisy by default, so unverified data is never
    admitted). Returns the cleaned dataset and a :class:`CleanReport`.
    """
    if treat_errors_as not in (VALID, NOISY):
        raise ValueError("treat_errors_as must be 'valid' or 'noisy'")
    labels = _labels_by_id(predictions)

    retained = []
    per_split: dict = {}
    for inst in dataset:
        if inst.id not in labels:
            raise MissingPrediction(inst.id)
        label = labels[inst.id]
        if label == ERROR_LABEL:
            label = treat_errors_as
        split_counts = per_split.setdefault(inst.split, Counter())
        split_counts["input"] += 1
        if label == VALID:
            retained.append(inst)
            split_counts["retained"] += 1

    cleaned = Dataset(retained)
    total = len(dataset)
    report = CleanReport(
        input_size=total,
        retained=len(cleaned),
        removed=total - len(cleaned),
        retained_ratio=len(cleaned) / total if total else 0.0,
        per_split={k: dict(v) for k, v in per_split.items()},
        provenance=dict(provenance or {}),
    )
    return cleaned, report


def sample_controlled(dataset: Dataset, target_size: int, seed: int) -> Dataset:
    """Uniform sample without replacement, deterministic in (order, seed).

    The sampled instances keep their original dataset order.
    """
    n = len(dataset)
    if target_size > n:
        raise TargetTooLarge(f"target {target_size} exceeds dataset size {n}")
    if target_size < 0:
        raise ValueError("target_size must be nonnegative")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=target_size, replace=False))
    return Dataset(dataset[int(i)] for i in chosen)


@dataclass
class ValidRatioReport:
    ratio: float  # gold-valid fraction among predicted-valid
    baseline: float  # gold-valid fraction of the whole evaluated set
    delta: float  # ratio - baseline, in fraction points
    predicted_valid: int
    true_valid_in_predicted: int

    def to_dict(self) -> dict:
        return {
            "valid_ratio": self.ratio,
            "baseline_ratio": self.baseline,
            "delta_points": self.delta,
            "predicted_valid": self.predicted_valid,
            "true_valid_in_predicted": self.true_valid_in_predicted,
        }


def valid_ratio(
    predictions: Union[Mapping[str, str], Sequence],
    gold_labels: Mapping[str, str],
) -> ValidRatioReport:
    """Valid-comment ratio of the cleaned set vs. the uncleaned baseline.

    The ratio equals the valid-class precision: among instances predicted
    valid, the fraction whose gold label is valid. The delta is measured
    against the gold-valid proportion of the full evaluated subset.
    """
    labels = _labels_by_id(predictions)
    evaluated = [gid for gid in gold_labels if gid in labels]
    if not evaluated:
        raise CleaningError("no overlap between predictions and gold labels")
    predicted_valid = [gid for gid in evaluated if labels[gid] == VALID]
    if not predicted_valid:
        raise EmptyPredictedValid("no instance predicted valid")
    hits = sum(gold_labels[gid] == VALID for gid in predicted_valid)
    baseline = sum(gold_labels[gid] == VALID for gid in evaluated) / len(evaluated)
    ratio = hits / len(predicted_valid)
    return ValidRatioReport(
        ratio=ratio,
        baseline=baseline,
        delta=ratio - baseline,
        predicted_valid=len(predicted_valid),
        true_valid_in_predicted=hits,
    )
