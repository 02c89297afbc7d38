"""Sentence-level BLEU-4 for generated review comments.

Scores are 0..100, averaged per subset rather than pooled corpus-level, so
per-subset means pair up with one-sided signed-rank tests against a
baseline run. A stop-word-filtered variant scores content overlap only.

Smoothing, spelled out so results are reproducible bit for bit: modified
n-gram precisions use the raw clipped ratio; when the clipped match count
for some n >= 2 is zero the ratio becomes (0+1)/(denominator+1); a zero
unigram match count is floored at the smallest positive float instead, so
fully disjoint candidates score above zero but below any real overlap.
"""

from __future__ import annotations

import math
import re
import sys
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

from .metrics import AllZeroDifferences, WilcoxonResult, wilcoxon_one_sided

KEEP_STOPWORDS = "keep_stopwords"
DROP_STOPWORDS = "drop_stopwords"

FULL_TEST = "full_test"
SUBSET_SOURCES = ("our", "tufano")
COMBINED = "combined"

_CODE_SPAN_RE = re.compile(r"`[^`]*`")
_WORD_OR_PUNCT_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

_P1_ZERO_FLOOR = sys.float_info.min


class BleuError(Exception):
    pass


class IdMismatch(BleuError):
    pass


def load_stopwords(path: Optional[Union[str, Path]] = None) -> frozenset:
    if path is not None:
        text = Path(path).read_text("utf-8")
    else:
        text = resources.files("reviewclean.data").joinpath("stopwords.txt").read_text("utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


_DEFAULT_STOPWORDS: Optional[frozenset] = None


def _default_stopwords() -> frozenset:
    global _DEFAULT_STOPWORDS
    if _DEFAULT_STOPWORDS is None:
        _DEFAULT_STOPWORDS = load_stopwords()
    return _DEFAULT_STOPWORDS


@dataclass(frozen=True)
class TokenizedComment:
    tokens: tuple
    source: str


def tokenize(
    text: str,
    mode: str = KEEP_STOPWORDS,
    stopwords: Optional[frozenset] = None,
) -> TokenizedComment:
    """Lowercase and split a comment into tokens.

    Punctuation becomes standalone tokens; backtick-delimited code spans
    survive as single tokens. ``drop_stopwords`` mode removes tokens found
    in the stop list (code spans keep their backticks and never match).
    """
    if mode not in (KEEP_STOPWORDS, DROP_STOPWORDS):
        raise ValueError(f"unknown tokenize mode {mode!r}")
    tokens: list = []
    pos = 0
    for span in _CODE_SPAN_RE.finditer(text):
        tokens.extend(_WORD_OR_PUNCT_RE.findall(text[pos : span.start()].lower()))
        tokens.append(span.group(0).lower())
        pos = span.end()
    tokens.extend(_WORD_OR_PUNCT_RE.findall(text[pos:].lower()))
    if mode == DROP_STOPWORDS:
        stop = stopwords if stopwords is not None else _default_stopwords()
        tokens = [t for t in tokens if t not in stop]
    return TokenizedComment(tokens=tuple(tokens), source=text)


def _tokens(value) -> tuple:
    if isinstance(value, TokenizedComment):
        return value.tokens
    return tuple(value)


def bleu4(candidate, reference) -> float:
    """BLEU-4 of one candidate against one reference, scaled to 0..100.

    Geometric mean of modified 1..4-gram precisions times the brevity
    penalty exp(1 - r/c) when the candidate is shorter than the reference.
    An empty candidate scores exactly 0.
    """
    cand = _tokens(candidate)
    ref = _tokens(reference)
    if not cand:
        return 0.0

    log_sum = 0.0
    for n in range(1, 5):
        matched, total = _clipped_matches(cand, ref, n)
        if matched > 0:
            p = matched / total
        elif n == 1:
            p = _P1_ZERO_FLOOR
        else:
            p = 1.0 / (total + 1.0)
        log_sum += math.log(p)

    if len(cand) < len(ref):
        brevity = math.exp(1.0 - len(ref) / len(cand))
    else:
        brevity = 1.0
    return 100.0 * brevity * math.exp(log_sum / 4.0)


def _clipped_matches(cand: tuple, ref: tuple, n: int) -> tuple:
    cand_ngrams = Counter(cand[i : i + n] for i in range(len(cand) - n + 1))
    ref_ngrams = Counter(ref[i : i + n] for i in range(len(ref) - n + 1))
    matched = sum(min(count, ref_ngrams[gram]) for gram, count in cand_ngrams.items())
    total = max(len(cand) - n + 1, 0)
    return matched, total


def relative_delta(new_mean: float, base_mean: float) -> float:
    """Relative change of an aggregate vs. a baseline aggregate."""
    if base_mean == 0:
        raise BleuError("baseline mean is zero; relative delta undefined")
    return (new_mean - base_mean) / base_mean


@dataclass(frozen=True)
class SubsetLabel:
    id: str
    label: str  # valid | noisy
    source: str  # our | tufano


@dataclass
class BleuReport:
    per_instance: dict  # id -> score
    subset_ids: dict  # subset name -> tuple of ids, in generation order
    subset_means: dict  # subset name -> mean score
    mode: str
    deltas: dict = field(default_factory=dict)  # subset -> relative delta
    significance: dict = field(default_factory=dict)  # subset -> WilcoxonResult|None

    def to_records(self) -> list:
        records = []
        for name in self.subset_means:
            rec = {
                "subset": name,
                "size": len(self.subset_ids[name]),
                "mean_bleu4": self.subset_means[name],
                "mode": self.mode,
            }
            if name in self.deltas:
                rec["relative_delta"] = self.deltas[name]
            sig = self.significance.get(name)
            if sig is not None:
                rec["wilcoxon_p"] = sig.p_value
                rec["wilcoxon_method"] = sig.method
                rec["wilcoxon_n_effective"] = sig.n_effective
            elif name in self.significance:
                rec["wilcoxon_p"] = None
            records.append(rec)
        return records

    def format_table(self) -> str:
        lines = [
            f"{'Subset':<18} {'n':>6} {'BLEU-4':>8} {'Delta':>9} {'p-value':>10}",
            "-" * 55,
        ]
        for name, mean in self.subset_means.items():
            delta = ""
            if name in self.deltas:
                arrow = "↑" if self.deltas[name] >= 0 else "↓"
                delta = f"{abs(self.deltas[name]) * 100:.1f}%{arrow}"
            sig = self.significance.get(name)
            p_text = f"{sig.p_value:.4g}" if sig is not None else ""
            lines.append(
                f"{name:<18} {len(self.subset_ids[name]):>6} {mean:>8.2f} "
                f"{delta:>9} {p_text:>10}"
            )
        return "\n".join(lines)


def bleu_report(
    generations: Mapping[str, str],
    references: Mapping[str, str],
    subset_labels: Sequence[SubsetLabel] = (),
    baseline: Optional[BleuReport] = None,
    mode: str = KEEP_STOPWORDS,
    stopwords: Optional[frozenset] = None,
) -> BleuReport:
    """Score generations against references and aggregate by subset.

    ``generations`` and ``references`` are aligned by instance id; a
    generation without a reference raises :class:`IdMismatch`. Subset
    membership comes from label records; every instance also belongs to the
    full-test aggregate, and per-label unions over sources form the
    combined subsets. With a baseline report, relative deltas and one-sided
    signed-rank tests (this run greater than baseline) attach per subset.
    """
    missing = [gid for gid in generations if gid not in references]
    if missing:
        raise IdMismatch(f"generations without references: {missing[:5]}")

    per_instance = {}
    for gid, text in generations.items():
        cand = tokenize(text, mode=mode, stopwords=stopwords)
        ref = tokenize(references[gid], mode=mode, stopwords=stopwords)
        per_instance[gid] = bleu4(cand, ref)

    order = list(generations)
    subsets: dict = {FULL_TEST: list(order)}
    labelled: dict = {}
    for rec in subset_labels:
        if rec.id not in per_instance:
            continue
        labelled.setdefault((rec.label, rec.source), set()).add(rec.id)
    names = []
    for label in ("valid", "noisy"):
        for source in SUBSET_SOURCES:
            names.append((f"{label}_{source}", labelled.get((label, source), set())))
        union = set()
        for source in SUBSET_SOURCES:
            union |= labelled.get((label, source), set())
        names.append((f"{label}_{COMBINED}", union))
    for name, members in names:
        subsets[name] = [gid for gid in order if gid in members]

    subset_ids = {name: tuple(ids) for name, ids in subsets.items() if ids}
    subset_means = {
        name: sum(per_instance[g] for g in ids) / len(ids)
        for name, ids in subset_ids.items()
    }

    report = BleuReport(
        per_instance=per_instance,
        subset_ids=subset_ids,
        subset_means=subset_means,
        mode=mode,
    )
    if baseline is not None:
        for name, ids in subset_ids.items():
            absent = [g for g in ids if g not in baseline.per_instance]
            if absent:
                raise IdMismatch(f"baseline missing instances: {absent[:5]}")
            report.deltas[name] = relative_delta(
                subset_means[name],
                sum(baseline.per_instance[g] for g in ids) / len(ids),
            )
            new_scores = [per_instance[g] for g in ids]
            base_scores = [baseline.per_instance[g] for g in ids]
            try:
                report.significance[name] = wilcoxon_one_sided(new_scores, base_scores)
            except AllZeroDifferences:
                report.significance[name] = None
    return report
