"""Parsers for the machine-readable trailer lines of judge and classifier replies."""

from __future__ import annotations

import re
from dataclasses import dataclass

JUDGE_LABELS = ("tautology", "contradictions", "irrelevance", "triviality")

ERROR_TAXONOMY: dict[str, tuple[str, ...]] = {
    "Natural Language Misunderstanding": (
        "problem-misunderstanding",
        "concept-object-error",
        "condition-conclusion-error",
    ),
    "Informal-Formal Misalignment": (
        "object-mapping-error",
        "logical-structure-error",
        "type-error",
    ),
}

_VERDICT_LINE_RE = re.compile(r"^[ \t]*VERDICT:[ \t]*(.*?)[ \t]*$", re.MULTILINE)
_REMOVE_RE = re.compile(r"^remove[ \t]*\([ \t]*([A-Za-z-]+)[ \t]*\)$")
_ERROR_LINE_RE = re.compile(r"^[ \t]*ERROR:[ \t]*(.*?)[ \t]*$", re.MULTILINE)


class UnparseableVerdict(ValueError):
    pass


@dataclass(frozen=True)
class JudgeVerdict:
    keep: bool
    label: str | None = None

    def __post_init__(self) -> None:
        if self.keep != (self.label is None):
            raise ValueError("a removal carries exactly one label")

    def __str__(self) -> str:
        return "keep" if self.keep else f"remove({self.label})"


@dataclass(frozen=True)
class ErrorClass:
    category: str | None
    subtype: str | None = None

    @property
    def is_error(self) -> bool:
        return self.category is not None

    @property
    def key(self) -> str:
        return "none" if self.category is None else f"{self.category} / {self.subtype}"


NO_ERROR = ErrorClass(None, None)


def parse_judge_verdict(response_text: str) -> JudgeVerdict:
    """Read the last ``VERDICT:`` line of a judge reply."""
    lines = _VERDICT_LINE_RE.findall(response_text)
    if not lines:
        raise UnparseableVerdict("no VERDICT line")
    value = lines[-1]
    if value == "keep":
        return JudgeVerdict(True)
    m = _REMOVE_RE.match(value)
    if m and m.group(1).lower() in JUDGE_LABELS:
        return JudgeVerdict(False, m.group(1).lower())
    raise UnparseableVerdict(f"unrecognised verdict {value!r}")


def parse_error_class(response_text: str) -> ErrorClass:
    """Read the last ``ERROR:`` line of a classifier reply."""
    lines = _ERROR_LINE_RE.findall(response_text)
    if not lines:
        raise UnparseableVerdict("no ERROR line")
    value = lines[-1]
    if value.lower() == "none":
        return NO_ERROR
    if "/" not in value:
        raise UnparseableVerdict(f"expected '<category> / <subtype>', got {value!r}")
    cat_text, sub_text = (s.strip() for s in value.split("/", 1))
    for category, subtypes in ERROR_TAXONOMY.items():
        if cat_text.lower() == category.lower():
            if sub_text.lower() in subtypes:
                return ErrorClass(category, sub_text.lower())
            raise UnparseableVerdict(f"{sub_text!r} is not a subtype of {category}")
    raise UnparseableVerdict(f"unknown error category {cat_text!r}")
