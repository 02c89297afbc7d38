"""Datasets of (code change, review comment) pairs: parsing, validation,
serialization, unified-diff structure, and summary statistics.

Records are UTF-8 JSON lines. Field names are configurable through a
:class:`FieldMap` so sibling distributions with different key names can be
ingested without rewriting files. Unknown fields are preserved verbatim so a
parse/write round trip is lossless.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, Optional, Sequence, Union

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
LABELS = ("valid", "noisy")

# aliases seen in mined distributions, normalized on ingest
_SPLIT_ALIASES = {
    "train": "train",
    "training": "train",
    "validation": "validation",
    "valid": "validation",
    "val": "validation",
    "dev": "validation",
    "test": "test",
}


class CorpusError(Exception):
    """Base class for dataset and diff parsing errors."""


class MalformedRecord(CorpusError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateId(CorpusError):
    def __init__(self, instance_id: str):
        super().__init__(f"duplicate id {instance_id!r}")
        self.instance_id = instance_id


class DiffSyntax(CorpusError):
    def __init__(self, position: int, reason: str):
        super().__init__(f"diff line {position}: {reason}")
        self.position = position
        self.reason = reason


@dataclass(frozen=True)
class FieldMap:
    """Maps record keys in the on-disk format to instance fields."""

    id: str = "id"
    patch: str = "patch"
    comment: str = "msg"
    lang: str = "lang"
    split: str = "split"
    gold_label: str = "gold_label"

    def known_keys(self) -> frozenset:
        return frozenset(
            (self.id, self.patch, self.comment, self.lang, self.split, self.gold_label)
        )

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "FieldMap":
        allowed = {"id", "patch", "comment", "lang", "split", "gold_label"}
        unknown = set(mapping) - allowed
        if unknown:
            raise ValueError(f"unknown field-map entries: {sorted(unknown)}")
        return cls(**mapping)


DEFAULT_FIELD_MAP = FieldMap()


@dataclass(frozen=True)
class ReviewInstance:
    """One (code diff, review comment) pair.

    ``extra`` holds fields of the source record that the field map does not
    claim; they ride along untouched through cleaning and serialization.
    """

    id: str
    patch: str
    comment: str
    lang: str = "unknown"
    split: str = "train"
    gold_label: Optional[str] = None
    extra: Mapping[str, object] = field(default_factory=dict)

    def with_split(self, split: str) -> "ReviewInstance":
        return replace(self, split=split)


class Dataset:
    """Immutable, id-indexed collection of :class:`ReviewInstance`."""

    def __init__(self, instances: Iterable[ReviewInstance]):
        self._instances = tuple(instances)
        by_id = {}
        for inst in self._instances:
            if inst.id in by_id:
                raise DuplicateId(inst.id)
            by_id[inst.id] = inst
        self._by_id = by_id

    def __len__(self) -> int:
        return len(self._instances)

    def __iter__(self) -> Iterator[ReviewInstance]:
        return iter(self._instances)

    def __getitem__(self, index: int) -> ReviewInstance:
        return self._instances[index]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self._instances == other._instances

    def __hash__(self):
        return hash(self._instances)

    @property
    def instances(self) -> Sequence[ReviewInstance]:
        return self._instances

    def ids(self) -> tuple:
        return tuple(inst.id for inst in self._instances)

    def get(self, instance_id: str) -> ReviewInstance:
        return self._by_id[instance_id]

    def __contains__(self, instance_id: str) -> bool:
        return instance_id in self._by_id

    def subset(self, ids: Iterable[str]) -> "Dataset":
        """Instances with the given ids, in this dataset's order."""
        wanted = set(ids)
        return Dataset(i for i in self._instances if i.id in wanted)

    def for_split(self, split: str) -> "Dataset":
        return Dataset(i for i in self._instances if i.split == split)

    def splits(self) -> tuple:
        seen = []
        for inst in self._instances:
            if inst.split not in seen:
                seen.append(inst.split)
        return tuple(seen)


@dataclass
class RejectedRecord:
    line_no: int
    reason: str
    raw: str


@dataclass
class ParseResult:
    dataset: Dataset
    rejects: list
    warnings: Counter

    @property
    def accepted(self) -> int:
        return len(self.dataset)

    @property
    def rejected(self) -> int:
        return len(self.rejects)


def parse_dataset(
    source: Union[str, Path, IO, Iterable[str]],
    field_map: FieldMap = DEFAULT_FIELD_MAP,
    default_split: str = "train",
    default_lang: str = "unknown",
) -> ParseResult:
    """Parse line-delimited records into a validated :class:`Dataset`.

    Every input line is either accepted or collected into the rejects report;
    nothing is silently dropped. Missing ``lang``/``split`` fields fall back
    to defaults with a counted warning rather than a rejection.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return parse_dataset(fh, field_map, default_split, default_lang)

    instances: list = []
    rejects: list = []
    warnings: Counter = Counter()
    seen_ids: set = set()

    for line_no, line in enumerate(source, start=1):
        raw = line.rstrip("\n")
        try:
            inst = _parse_record(
                raw, line_no, field_map, default_split, default_lang, warnings
            )
            if inst.id in seen_ids:
                raise DuplicateId(inst.id)
        except (MalformedRecord, DuplicateId) as err:
            rejects.append(RejectedRecord(line_no=line_no, reason=str(err), raw=raw))
            continue
        seen_ids.add(inst.id)
        instances.append(inst)

    for kind, count in warnings.items():
        log.warning("parse_dataset: %s on %d records", kind, count)
    return ParseResult(dataset=Dataset(instances), rejects=rejects, warnings=warnings)


def _parse_record(
    raw: str,
    line_no: int,
    fm: FieldMap,
    default_split: str,
    default_lang: str,
    warnings: Counter,
) -> ReviewInstance:
    if not raw.strip():
        raise MalformedRecord(line_no, "blank line")
    try:
        record = json.loads(raw)
    except json.JSONDecodeError as err:
        raise MalformedRecord(line_no, f"invalid JSON: {err.msg}") from err
    if not isinstance(record, dict):
        raise MalformedRecord(line_no, "record is not a JSON object")

    patch = record.get(fm.patch)
    if not isinstance(patch, str) or not patch:
        raise MalformedRecord(line_no, f"missing or empty {fm.patch!r} field")
    comment = record.get(fm.comment)
    if not isinstance(comment, str) or not comment.strip():
        raise MalformedRecord(line_no, f"missing or empty {fm.comment!r} field")

    instance_id = record.get(fm.id)
    if instance_id is None:
        instance_id = f"line{line_no}"
        warnings["missing id, synthesized from line number"] += 1
    else:
        instance_id = str(instance_id)

    lang = record.get(fm.lang)
    if lang is None or lang == "":
        lang = default_lang
        warnings["missing lang, defaulted"] += 1
    else:
        lang = str(lang)

    split_raw = record.get(fm.split)
    if split_raw is None or split_raw == "":
        split = default_split
        warnings["missing split, defaulted"] += 1
    else:
        split = _SPLIT_ALIASES.get(str(split_raw).lower())
        if split is None:
            raise MalformedRecord(line_no, f"unrecognized split {split_raw!r}")

    gold = record.get(fm.gold_label)
    if gold is not None:
        gold = str(gold).lower()
        if gold not in LABELS:
            raise MalformedRecord(line_no, f"gold label must be one of {LABELS}")

    extra = {k: v for k, v in record.items() if k not in fm.known_keys()}
    return ReviewInstance(
        id=instance_id,
        patch=patch,
        comment=comment,
        lang=lang,
        split=split,
        gold_label=gold,
        extra=extra,
    )


def write_dataset(
    dataset: Dataset,
    sink: Union[str, Path, IO],
    field_map: FieldMap = DEFAULT_FIELD_MAP,
) -> int:
    """Serialize a dataset as JSON lines; returns the record count.

    Round-trip safe: ``parse_dataset(write_dataset(d))`` reproduces ``d``
    field for field, including unknown extra fields.
    """
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8") as fh:
            return write_dataset(dataset, fh, field_map)

    count = 0
    for inst in dataset:
        record = {
            field_map.id: inst.id,
            field_map.patch: inst.patch,
            field_map.comment: inst.comment,
            field_map.lang: inst.lang,
            field_map.split: inst.split,
        }
        if inst.gold_label is not None:
            record[field_map.gold_label] = inst.gold_label
        for key, value in inst.extra.items():
            record.setdefault(key, value)
        sink.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
        sink.write("\n")
        count += 1
    return count


def write_rejects(rejects: Sequence[RejectedRecord], sink: Union[str, Path, IO]) -> int:
    """Emit the rejects report: one record per rejected input line."""
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8") as fh:
            return write_rejects(rejects, fh)
    for rej in rejects:
        sink.write(
            json.dumps(
                {"line": rej.line_no, "reason": rej.reason, "raw": rej.raw},
                ensure_ascii=False,
                separators=(",", ":"),
            )
        )
        sink.write("\n")
    return len(rejects)


@dataclass
class DatasetStats:
    total: int
    per_split: dict
    per_lang: dict
    gold_counts: dict

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "per_split": dict(sorted(self.per_split.items())),
            "per_lang": dict(sorted(self.per_lang.items())),
            "gold_counts": dict(sorted(self.gold_counts.items())),
        }


def dataset_stats(dataset: Dataset) -> DatasetStats:
    per_split: Counter = Counter()
    per_lang: Counter = Counter()
    gold: Counter = Counter()
    for inst in dataset:
        per_split[inst.split] += 1
        per_lang[inst.lang] += 1
        if inst.gold_label is not None:
            gold[inst.gold_label] += 1
    return DatasetStats(
        total=len(dataset),
        per_split=dict(per_split),
        per_lang=dict(per_lang),
        gold_counts=dict(gold),
    )


# ---------------------------------------------------------------------------
# Unified diffs

CONTEXT = "context"
ADDED = "added"
REMOVED = "removed"

_HUNK_HEADER = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@(.*)$")
# lines that open a new file section inside a concatenated multi-file diff
_FILE_BOUNDARY = re.compile(r"^(diff |--- |\+\+\+ |Index: |index )")


@dataclass(frozen=True)
class Hunk:
    old_start: int
    old_len: int
    new_start: int
    new_len: int
    lines: tuple  # of (marker, text)
    section: str = ""

    def old_lines(self) -> list:
        return [text for marker, text in self.lines if marker in (CONTEXT, REMOVED)]

    def new_lines(self) -> list:
        return [text for marker, text in self.lines if marker in (CONTEXT, ADDED)]


@dataclass(frozen=True)
class DiffPatch:
    hunks: tuple
    preamble: tuple = ()


def parse_unified_diff(patch: str) -> DiffPatch:
    """Parse unified-diff text into structured hunks, validating counts.

    Raises :class:`DiffSyntax` when a hunk body disagrees with its header or
    when headers within one file section run backwards. ``\\ No newline at
    end of file`` markers are ignored; lines before the first header and
    file boundaries between hunks are kept as preamble.
    """
    hunks: list = []
    preamble: list = []
    lines = patch.splitlines()
    pos = 0
    last_old_start = None  # reset at file boundaries

    while pos < len(lines):
        line = lines[pos]
        header = _HUNK_HEADER.match(line)
        if header is None:
            if line.startswith("@@"):
                raise DiffSyntax(pos + 1, f"malformed hunk header: {line!r}")
            if hunks and not line.startswith(("\\",)) and line.strip():
                # between hunks only file-section boundaries are meaningful;
                # anything else is tolerated as preamble of the next section
                if _FILE_BOUNDARY.match(line):
                    last_old_start = None
            preamble.append(line)
            pos += 1
            continue

        old_start = int(header.group(1))
        old_len = int(header.group(2)) if header.group(2) is not None else 1
        new_start = int(header.group(3))
        new_len = int(header.group(4)) if header.group(4) is not None else 1
        section = header.group(5)
        header_pos = pos + 1

        if last_old_start is not None and old_start < last_old_start:
            raise DiffSyntax(header_pos, "hunk headers not nondecreasing in old start")
        last_old_start = old_start

        body: list = []
        old_remaining = old_len
        new_remaining = new_len
        pos += 1
        while old_remaining > 0 or new_remaining > 0:
            if pos >= len(lines):
                raise DiffSyntax(
                    header_pos,
                    f"hunk body ended early: {old_remaining} old / "
                    f"{new_remaining} new lines still expected",
                )
            body_line = lines[pos]
            if body_line.startswith("\\"):
                pos += 1  # "\ No newline at end of file"
                continue
            if _HUNK_HEADER.match(body_line):
                raise DiffSyntax(
                    pos + 1,
                    f"new hunk header before previous hunk complete "
                    f"({old_remaining} old / {new_remaining} new lines expected)",
                )
            marker, text = _classify_body_line(body_line)
            if marker in (CONTEXT, REMOVED):
                if old_remaining <= 0:
                    raise DiffSyntax(pos + 1, "more old-side lines than header declares")
                old_remaining -= 1
            if marker in (CONTEXT, ADDED):
                if new_remaining <= 0:
                    raise DiffSyntax(pos + 1, "more new-side lines than header declares")
                new_remaining -= 1
            body.append((marker, text))
            pos += 1
        hunks.append(
            Hunk(
                old_start=old_start,
                old_len=old_len,
                new_start=new_start,
                new_len=new_len,
                lines=tuple(body),
                section=section,
            )
        )

    return DiffPatch(hunks=tuple(hunks), preamble=tuple(preamble))


def _classify_body_line(line: str):
    if line.startswith("+"):
        return ADDED, line[1:]
    if line.startswith("-"):
        return REMOVED, line[1:]
    if line.startswith(" "):
        return CONTEXT, line[1:]
    if line == "":
        # mined diffs frequently strip the leading space of empty context lines
        return CONTEXT, ""
    return CONTEXT, line  # lenient: treat unmarked lines as context


def split_hunks(patch: str) -> tuple:
    """Split raw diff text into (preamble lines, list of per-hunk line blocks).

    Purely textual, never raises; used where the original bytes must be kept
    (e.g. prompt truncation at hunk boundaries).
    """
    preamble: list = []
    blocks: list = []
    current: Optional[list] = None
    for line in patch.splitlines():
        if _HUNK_HEADER.match(line):
            current = [line]
            blocks.append(current)
        elif current is not None:
            current.append(line)
        else:
            preamble.append(line)
    return preamble, blocks
