"""Classification prompt rendering and response parsing.

Prompts come in four variants: instructions carry either the bare
valid/noisy definitions or the definitions plus seven concretizing rules,
and the user turn carries either the review comment alone or the comment
plus the (budget-truncated) code diff. Templates and rule texts are plain
files with named placeholders so the wording can be swapped without code
changes.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from .corpus import ReviewInstance, split_hunks

DEFINITION = "definition"
AUXILIARY = "auxiliary"
INSTRUCTION_VARIANTS = (DEFINITION, AUXILIARY)

COMMENT_ONLY = "comment_only"
COMMENT_PLUS_DIFF = "comment_plus_diff"
INPUT_MODES = (COMMENT_ONLY, COMMENT_PLUS_DIFF)

DEFAULT_DIFF_TOKEN_BUDGET = 3000
ELISION_MARKER = "[... diff truncated ...]"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_LABEL_LINE_RE = re.compile(r"^\s*label\s*[:\-]\s*(.*)$", re.IGNORECASE)
_LABEL_TOKEN_RE = re.compile(r"\b(valid|noisy)\b", re.IGNORECASE)


class PromptError(Exception):
    pass


class UnparsableResponse(PromptError):
    """The model response contains no recognizable label token."""

    def __init__(self, raw: str):
        super().__init__(f"no label found in response: {raw[:200]!r}")
        self.raw = raw


class AmbiguousResponse(PromptError):
    """Both label tokens appear with no structured line to disambiguate."""

    def __init__(self, raw: str):
        super().__init__(f"both labels found in response: {raw[:200]!r}")
        self.raw = raw


def _read_default(name: str) -> str:
    return resources.files("reviewclean.data").joinpath(name).read_text("utf-8")


def load_auxiliary_rules(path: Optional[Union[str, Path]] = None) -> tuple:
    """Rule texts, one per non-blank line of the rules file."""
    text = Path(path).read_text("utf-8") if path else _read_default("auxiliary_rules.txt")
    return tuple(line.strip() for line in text.splitlines() if line.strip())


@dataclass(frozen=True)
class PromptConfig:
    instruction_variant: str = DEFINITION
    input_mode: str = COMMENT_ONLY
    auxiliary_rules: tuple = ()
    diff_token_budget: int = DEFAULT_DIFF_TOKEN_BUDGET
    system_template: str = ""
    user_template_comment: str = ""
    user_template_diff: str = ""
    definitions: str = ""

    def __post_init__(self):
        if self.instruction_variant not in INSTRUCTION_VARIANTS:
            raise ValueError(f"instruction_variant must be one of {INSTRUCTION_VARIANTS}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.instruction_variant == AUXILIARY and not self.auxiliary_rules:
            raise ValueError("auxiliary variant requires a non-empty rule list")
        if self.diff_token_budget <= 0:
            raise ValueError("diff_token_budget must be positive")

    @classmethod
    def load(
        cls,
        instruction_variant: str = DEFINITION,
        input_mode: str = COMMENT_ONLY,
        diff_token_budget: int = DEFAULT_DIFF_TOKEN_BUDGET,
        system_template_path: Optional[Union[str, Path]] = None,
        user_comment_template_path: Optional[Union[str, Path]] = None,
        user_diff_template_path: Optional[Union[str, Path]] = None,
        definitions_path: Optional[Union[str, Path]] = None,
        rules_path: Optional[Union[str, Path]] = None,
    ) -> "PromptConfig":
        """Build a config from template files, falling back to packaged defaults."""

        def read(path, default_name):
            return Path(path).read_text("utf-8") if path else _read_default(default_name)

        rules = ()
        if instruction_variant == AUXILIARY:
            rules = load_auxiliary_rules(rules_path)
        return cls(
            instruction_variant=instruction_variant,
            input_mode=input_mode,
            auxiliary_rules=rules,
            diff_token_budget=diff_token_budget,
            system_template=read(system_template_path, "system_prompt.txt"),
            user_template_comment=read(user_comment_template_path, "user_comment_only.txt"),
            user_template_diff=read(user_diff_template_path, "user_comment_diff.txt"),
            definitions=read(definitions_path, "definitions.txt"),
        )


@dataclass(frozen=True)
class RenderedPrompt:
    system_text: str
    user_text: str
    fingerprint: str = field(init=False, default="")

    def __post_init__(self):
        digest = hashlib.sha256()
        digest.update(self.system_text.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(self.user_text.encode("utf-8"))
        object.__setattr__(self, "fingerprint", digest.hexdigest())


def render_prompt(instance: ReviewInstance, config: PromptConfig) -> RenderedPrompt:
    """Render the (system, user) prompt pair for one instance.

    Pure in (instance, config): identical inputs produce byte-identical text
    and therefore an identical fingerprint.
    """
    if config.instruction_variant == AUXILIARY:
        numbered = "\n".join(
            f"{i}. {rule}" for i, rule in enumerate(config.auxiliary_rules, start=1)
        )
        rules_block = f"Apply these rules:\n{numbered}\n"
    else:
        rules_block = ""
    system_text = config.system_template.format(
        definitions=config.definitions.rstrip("\n"), rules=rules_block
    )

    if config.input_mode == COMMENT_PLUS_DIFF:
        diff = truncate_diff(instance.patch, config.diff_token_budget)
        user_text = config.user_template_diff.format(diff=diff, comment=instance.comment)
    else:
        user_text = config.user_template_comment.format(comment=instance.comment)
    return RenderedPrompt(system_text=system_text, user_text=user_text)


def approx_token_count(text: str) -> int:
    """Token count under the budgeting tokenizer (word runs + punctuation)."""
    return len(_TOKEN_RE.findall(text))


def truncate_diff(patch: str, budget: int) -> str:
    """Cut a diff down to at most ``budget`` approximate tokens of content.

    Whole hunks are kept from the start; when anything is dropped an elision
    marker line is appended (the marker is not counted against the budget).
    Diffs without recognizable hunk headers are truncated line by line.
    No-op when the patch is already within budget.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    if approx_token_count(patch) <= budget:
        return patch

    preamble, blocks = split_hunks(patch)
    if blocks:
        units = []
        if any(line.strip() for line in preamble):
            units.append(preamble)
        units.extend(blocks)
    else:
        units = [[line] for line in patch.splitlines()]

    kept: list = []
    used = 0
    for unit in units:
        cost = approx_token_count("\n".join(unit))
        if used + cost > budget:
            break
        kept.extend(unit)
        used += cost
    kept.append(ELISION_MARKER)
    return "\n".join(kept)


def parse_label_response(text: str) -> str:
    """Extract the valid/noisy decision from a model response.

    The structured ``Label:`` line wins; without one the whole text is
    scanned, and finding both labels there raises :class:`AmbiguousResponse`
    rather than guessing.
    """
    if not text or not text.strip():
        raise UnparsableResponse(text or "")

    for line in text.splitlines():
        match = _LABEL_LINE_RE.match(line)
        if match is None:
            continue
        tokens = _distinct_labels(match.group(1))
        if len(tokens) == 1:
            return tokens[0]
        if len(tokens) > 1:
            raise AmbiguousResponse(text)
        break  # label line present but useless; fall back to full scan

    tokens = _distinct_labels(text)
    if len(tokens) == 1:
        return tokens[0]
    if len(tokens) > 1:
        raise AmbiguousResponse(text)
    raise UnparsableResponse(text)


def _distinct_labels(text: str) -> list:
    seen: list = []
    for match in _LABEL_TOKEN_RE.finditer(text):
        token = match.group(1).lower()
        if token not in seen:
            seen.append(token)
    return seen
