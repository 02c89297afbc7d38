"""Classification metrics, inter-rater agreement, and paired significance.

All metrics are computed in full precision; percentages are rounded
half-away-from-zero to one decimal only when formatted for display.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Optional, Sequence

import numpy as np

VALID = "valid"
NOISY = "noisy"
LABELS = (VALID, NOISY)


class MetricsError(Exception):
    pass


class LengthMismatch(MetricsError):
    pass


class DegenerateMarginals(MetricsError):
    """Chance agreement is 1 while observed agreement is not."""


class AllZeroDifferences(MetricsError):
    """Every paired difference is zero; the signed-rank test is undefined."""


@dataclass(frozen=True)
class ConfusionMatrix:
    """2x2 counts with "valid" as the designated positive class."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ConfusionMatrix":
        """The same pairs viewed with "noisy" as the positive class."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)


def confusion(gold: Sequence[str], pred: Sequence[str]) -> ConfusionMatrix:
    if len(gold) != len(pred):
        raise LengthMismatch(f"{len(gold)} gold labels vs {len(pred)} predictions")
    tp = fp = fn = tn = 0
    for g, p in zip(gold, pred):
        if g not in LABELS or p not in LABELS:
            raise ValueError(f"labels must be in {LABELS}, got ({g!r}, {p!r})")
        if g == VALID and p == VALID:
            tp += 1
        elif g == NOISY and p == VALID:
            fp += 1
        elif g == VALID and p == NOISY:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    predicted_count: int
    degenerate: bool = False


def class_metrics(cm: ConfusionMatrix, positive_class: str = VALID) -> ClassMetrics:
    """Precision/recall/F1 for one class, on the 0..1 scale.

    Degenerate denominators (no predictions of the class, or no gold
    members) yield 0 with the ``degenerate`` flag set instead of an error.
    """
    if positive_class == NOISY:
        cm = cm.swapped()
    elif positive_class != VALID:
        raise ValueError(f"positive_class must be in {LABELS}")
    predicted = cm.tp + cm.fp
    support = cm.tp + cm.fn
    degenerate = predicted == 0 or support == 0
    precision = cm.tp / predicted if predicted else 0.0
    recall = cm.tp / support if support else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ClassMetrics(
        precision=precision,
        recall=recall,
        f1=f1,
        support=support,
        predicted_count=predicted,
        degenerate=degenerate,
    )


def weighted_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    """Support-weighted average of the per-class metrics (gold supports)."""
    total = cm.total
    if total == 0:
        raise MetricsError("empty confusion matrix")
    per_class = [class_metrics(cm, label) for label in LABELS]
    weights = [m.support / total for m in per_class]
    precision = sum(m.precision * w for m, w in zip(per_class, weights))
    recall = sum(m.recall * w for m, w in zip(per_class, weights))
    f1 = sum(m.f1 * w for m, w in zip(per_class, weights))
    return ClassMetrics(
        precision=precision,
        recall=recall,
        f1=f1,
        support=total,
        predicted_count=total,
    )


def cohens_kappa(labels_a: Sequence[str], labels_b: Sequence[str]) -> float:
    """Cohen's kappa between two annotators over the same items.

    Chance agreement is the sum over labels of the product of the two
    annotators' marginal proportions. When chance agreement is 1, kappa is
    defined as 1 for perfect observed agreement and raises
    :class:`DegenerateMarginals` otherwise.
    """
    labels_a = list(labels_a)
    labels_b = list(labels_b)
    if len(labels_a) != len(labels_b):
        raise LengthMismatch(f"{len(labels_a)} vs {len(labels_b)} labels")
    n = len(labels_a)
    if n < 2:
        raise MetricsError("need at least 2 paired labels")
    alphabet = sorted(set(labels_a) | set(labels_b))
    p_observed = sum(a == b for a, b in zip(labels_a, labels_b)) / n
    p_expected = sum(
        (labels_a.count(lab) / n) * (labels_b.count(lab) / n) for lab in alphabet
    )
    if 1.0 - p_expected == 0.0:
        if p_observed == 1.0:
            return 1.0
        raise DegenerateMarginals("chance agreement is 1 with imperfect agreement")
    return (p_observed - p_expected) / (1.0 - p_expected)


# ---------------------------------------------------------------------------
# One-sided Wilcoxon signed-rank test

EXACT_THRESHOLD = 12

EXACT = "exact"
NORMAL_APPROXIMATION = "normal-approximation"


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # W+, sum of ranks of positive differences
    n_effective: int
    p_value: float
    method: str


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with tied values receiving the average of their ranks."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_one_sided(
    x: Sequence[float],
    y: Sequence[float],
    alternative: str = "greater",
    exact_threshold: int = EXACT_THRESHOLD,
    method: str = "auto",
) -> WilcoxonResult:
    """One-sided Wilcoxon signed-rank test of ``x`` greater than ``y``.

    Zero differences are dropped; tied absolute differences receive average
    ranks. For ``n_effective <= exact_threshold`` the p-value is computed by
    enumerating all 2**n sign assignments; beyond that a normal
    approximation with tie-corrected variance and continuity correction is
    used. ``method`` can force either route.
    """
    if alternative != "greater":
        raise ValueError("only the 'greater' alternative is supported")
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} vs {len(y)} paired scores")
    if method not in ("auto", EXACT, NORMAL_APPROXIMATION):
        raise ValueError(f"unknown method {method!r}")

    diff = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    diff = diff[diff != 0.0]
    n = diff.size
    if n == 0:
        raise AllZeroDifferences("all paired differences are zero")

    ranks = _average_ranks(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())

    if method == EXACT or (method == "auto" and n <= exact_threshold):
        p = _exact_p_greater(ranks, w_plus)
        used = EXACT
    else:
        p = _approx_p_greater(ranks, w_plus, n)
        used = NORMAL_APPROXIMATION
    return WilcoxonResult(statistic=w_plus, n_effective=n, p_value=p, method=used)


def _exact_p_greater(ranks: np.ndarray, w_plus: float) -> float:
    # ranks are integers or half-integers, so sums compare exactly in floats
    n = ranks.size
    masks = np.arange(2**n, dtype=np.uint64)[:, None]
    bits = (masks >> np.arange(n, dtype=np.uint64)) & 1
    w_all = bits.astype(np.float64) @ ranks
    return float(np.count_nonzero(w_all >= w_plus)) / float(2**n)


def _approx_p_greater(ranks: np.ndarray, w_plus: float, n: int) -> float:
    mean = n * (n + 1) / 4.0
    variance = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    variance -= float(((tie_counts**3 - tie_counts) / 48.0).sum())
    if variance <= 0:
        raise MetricsError("zero variance in normal approximation")
    z = (w_plus - mean - 0.5) / math.sqrt(variance)
    p = 0.5 * math.erfc(z / math.sqrt(2.0))
    return min(max(p, math.ulp(0.0)), 1.0)


# ---------------------------------------------------------------------------
# Presentation

def format_percent(fraction: float) -> str:
    """0..1 fraction as a percentage string, one decimal, half away from zero."""
    quantized = Decimal(repr(fraction * 100.0)).quantize(
        Decimal("0.1"), rounding=ROUND_HALF_UP
    )
    return str(quantized)


def classification_summary(cm: ConfusionMatrix) -> dict:
    """Machine-readable per-class and weighted metrics for one confusion."""
    out = {"counts": {"tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn}}
    for name, m in (
        ("overall_weighted", weighted_metrics(cm)),
        (VALID, class_metrics(cm, VALID)),
        (NOISY, class_metrics(cm, NOISY)),
    ):
        out[name] = {
            "precision": m.precision,
            "recall": m.recall,
            "f1": m.f1,
            "support": m.support,
            "predicted_count": m.predicted_count,
        }
    return out


def format_classification_table(
    summaries: Mapping[str, dict], title: Optional[str] = None
) -> str:
    """Render rows of :func:`classification_summary` in the report layout:
    overall (weighted) then valid / noisy blocks with predicted counts."""
    header = (
        f"{'Model':<24} {'Prec':>6} {'Rec':>6} {'F1':>6} | "
        f"{'Prec':>6} {'Rec':>6} {'F1':>6} {'#':>6} | "
        f"{'Prec':>6} {'Rec':>6} {'F1':>6} {'#':>6}"
    )
    group = (
        f"{'':<24} {'Overall (weighted)':^20} | "
        f"{'Valid':^27} | {'Noisy':^27}"
    )
    lines = []
    if title:
        lines.append(title)
    lines.extend([group, header, "-" * len(header)])
    for name, summary in summaries.items():
        ov, va, no = summary["overall_weighted"], summary[VALID], summary[NOISY]

        def cells(m):
            return (
                f"{format_percent(m['precision']):>6} "
                f"{format_percent(m['recall']):>6} "
                f"{format_percent(m['f1']):>6}"
            )

        lines.append(
            f"{name:<24} {cells(ov)} | {cells(va)} {va['predicted_count']:>6} | "
            f"{cells(no)} {no['predicted_count']:>6}"
        )
    return "\n".join(lines)
