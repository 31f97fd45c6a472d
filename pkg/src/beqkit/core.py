"""Domain types and model-output parsing shared by every pipeline stage."""

from __future__ import annotations

import enum
import re
import textwrap
from dataclasses import dataclass, replace
from typing import Any


class ParseError(ValueError):
    """Raised when raw model output cannot be turned into a formal statement."""


class NoTheoremFound(ParseError):
    pass


class MultipleTheorems(ParseError):
    pass


class MissingSorry(ParseError):
    pass


class InvalidIdentifier(ValueError):
    pass


class NameCollision(ValueError):
    pass


class ProblemType(str, enum.Enum):
    ALGEBRA = "Algebra"
    NUMBER_THEORY = "Number Theory"
    GEOMETRY = "Geometry"
    COMBINATORICS = "Combinatorics"
    CALCULUS = "Calculus"
    INEQUALITIES = "Inequalities"
    LOGIC_AND_PUZZLES = "Logic and Puzzles"
    OTHER = "Other"

    @classmethod
    def parse(cls, value: str | None) -> "ProblemType":
        if value is None:
            return cls.OTHER
        key = re.sub(r"[^a-z]", "", value.lower())
        for member in cls:
            if re.sub(r"[^a-z]", "", member.value.lower()) == key:
                return member
            if member.name.replace("_", "").lower() == key:
                return member
        return cls.OTHER


@dataclass(frozen=True)
class InformalProblem:
    id: str
    text: str
    source: str = ""
    problem_type: ProblemType = ProblemType.OTHER
    answer: str | None = None
    is_valid_flag: bool | None = None
    is_proof: bool = True

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("InformalProblem.id must be non-empty")
        if not self.text:
            raise ValueError(f"InformalProblem {self.id!r} has empty text")
        if not self.is_proof and self.answer is None:
            raise ValueError(f"calculation problem {self.id!r} has no answer")

    @classmethod
    def from_json(cls, record: dict[str, Any]) -> "InformalProblem":
        answer = record.get("answer")
        is_proof = record.get("is_proof")
        if is_proof is None:
            is_proof = answer in (None, "", "proof")
        return cls(
            id=str(record["id"]),
            text=record["text"],
            source=record.get("source", ""),
            problem_type=ProblemType.parse(record.get("problem_type")),
            answer=answer if answer not in ("",) else None,
            is_valid_flag=record.get("problem_is_valid"),
            is_proof=bool(is_proof),
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "source": self.source,
            "problem_type": self.problem_type.value,
            "answer": self.answer,
            "problem_is_valid": self.is_valid_flag,
            "is_proof": self.is_proof,
        }


_IDENT_RE = re.compile(r"^[A-Za-z_Ͱ-Ͽἀ-῿][A-Za-z0-9_'!?Ͱ-Ͽἀ-῿₀-ₜ.]*$")
# name stops at whitespace or the first binder/colon
_THEOREM_LINE_RE = re.compile(r"^theorem[ \t]+([^\s:({\[⦃]+)", re.MULTILINE)
_PROOF_TAIL_RE = re.compile(r":=\s*(?:by\s+)?sorry\s*$")
_DECL_NAME_RE = re.compile(
    r"^(?:@\[[^\]]*\]\s*)?(?:(?:noncomputable|private|protected|partial|unsafe)\s+)*"
    r"(?:def|abbrev|theorem|lemma|structure|inductive|class|instance|axiom|opaque)\s+([^\s:({\[⦃]+)"
)


def is_identifier(name: str) -> bool:
    return bool(_IDENT_RE.match(name)) and not name.endswith(".")


def header_declared_names(header: str) -> set[str]:
    """Names introduced by column-0 declarations in a header."""
    names = set()
    for line in header.splitlines():
        m = _DECL_NAME_RE.match(line)
        if m:
            names.add(m.group(1))
    return names


@dataclass(frozen=True)
class FormalStatement:
    header: str
    theorem_name: str
    body: str

    def __post_init__(self) -> None:
        names = _THEOREM_LINE_RE.findall(self.body)
        if len(names) != 1:
            raise ValueError("body must hold exactly one top-level theorem")
        if names[0] != self.theorem_name:
            raise ValueError(f"theorem name {self.theorem_name!r} does not match body")
        if not _PROOF_TAIL_RE.search(self.body):
            raise ValueError("body must end with a `sorry` proof")

    @property
    def full_text(self) -> str:
        if not self.header:
            return self.body
        return f"{self.header}\n\n{self.body}"

    @property
    def signature(self) -> str:
        """Binders and type of the theorem, without name and proof."""
        m = _THEOREM_LINE_RE.search(self.body)
        assert m is not None
        tail = _PROOF_TAIL_RE.search(self.body)
        assert tail is not None
        return self.body[m.end():tail.start()].strip()

    @property
    def proposition(self) -> str:
        sig = canonicalize(self.signature)
        return sig[1:].lstrip() if sig.startswith(":") else sig

    def with_proof(self, name: str, proof: str) -> str:
        """Render the theorem under ``name`` with ``proof`` after ``:= ``."""
        return f"theorem {name} {self.signature} := {proof}"

    @classmethod
    def from_json(cls, record: dict[str, Any]) -> "FormalStatement":
        header = record.get("header", "")
        body = record["body"]
        name = record.get("theorem_name")
        if name is None:
            found = _THEOREM_LINE_RE.findall(body)
            if not found:
                raise NoTheoremFound("record body has no theorem")
            name = found[0]
        return cls(header=header, theorem_name=name, body=body)

    def to_json(self) -> dict[str, str]:
        return {"header": self.header, "theorem_name": self.theorem_name, "body": self.body}


@dataclass(frozen=True)
class Candidate:
    raw_output: str
    parsed: FormalStatement | None = None
    parse_error: str | None = None

    def __post_init__(self) -> None:
        if (self.parsed is None) == (self.parse_error is None):
            raise ValueError("exactly one of parsed / parse_error must be set")

    def to_json(self) -> dict[str, Any]:
        return {
            "raw_output": self.raw_output,
            "parsed": self.parsed.to_json() if self.parsed else None,
            "parse_error": self.parse_error,
        }

    @classmethod
    def from_json(cls, record: dict[str, Any]) -> "Candidate":
        parsed = record.get("parsed")
        return cls(
            raw_output=record.get("raw_output", ""),
            parsed=FormalStatement.from_json(parsed) if parsed else None,
            parse_error=record.get("parse_error"),
        )


@dataclass(frozen=True)
class CandidateSet:
    problem_id: str
    candidates: tuple[Candidate, ...] = ()

    @classmethod
    def from_outputs(cls, problem_id: str, outputs: list[str], coerce_sorry: bool = False) -> "CandidateSet":
        cands = []
        for raw in outputs:
            try:
                cands.append(Candidate(raw, parsed=extract_formal_statement(raw, coerce_sorry=coerce_sorry)))
            except ParseError as exc:
                cands.append(Candidate(raw, parse_error=f"{type(exc).__name__}: {exc}"))
        return cls(problem_id, tuple(cands))

    def to_json(self) -> dict[str, Any]:
        return {"problem_id": self.problem_id, "candidates": [c.to_json() for c in self.candidates]}

    @classmethod
    def from_json(cls, record: dict[str, Any]) -> "CandidateSet":
        return cls(
            problem_id=str(record["problem_id"]),
            candidates=tuple(Candidate.from_json(c) for c in record["candidates"]),
        )


@dataclass(frozen=True)
class VerificationVerdict:
    passed: bool
    has_sorry: bool = False
    diagnostics: tuple[str, ...] = ()
    elapsed_ms: int = 0
    timed_out: bool = False

    def __post_init__(self) -> None:
        if self.timed_out and self.passed:
            raise ValueError("a timed-out check cannot pass")
        if self.elapsed_ms < 0:
            raise ValueError("elapsed_ms must be non-negative")

    def to_json(self) -> dict[str, Any]:
        return {
            "pass": self.passed,
            "has_sorry": self.has_sorry,
            "diagnostics": list(self.diagnostics),
            "elapsed_ms": self.elapsed_ms,
            "timed_out": self.timed_out,
        }

    @classmethod
    def from_json(cls, record: dict[str, Any]) -> "VerificationVerdict":
        return cls(
            passed=bool(record["pass"]),
            has_sorry=bool(record.get("has_sorry", False)),
            diagnostics=tuple(record.get("diagnostics", ())),
            elapsed_ms=int(record.get("elapsed_ms", 0)),
            timed_out=bool(record.get("timed_out", False)),
        )


@dataclass(frozen=True)
class EquivalencePartition:
    classes: tuple[tuple[int, ...], ...] = ()
    unverified: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        seen: list[int] = list(self.unverified)
        for cls_ in self.classes:
            if not cls_:
                raise ValueError("equivalence classes must be non-empty")
            seen.extend(cls_)
        if len(seen) != len(set(seen)):
            raise ValueError("partition indices must be disjoint")

    @property
    def size(self) -> int:
        return sum(len(c) for c in self.classes) + len(self.unverified)

    def to_json(self) -> dict[str, list]:
        return {"classes": [list(c) for c in self.classes], "unverified": list(self.unverified)}

    @classmethod
    def from_json(cls, record: dict[str, list]) -> "EquivalencePartition":
        return cls(
            classes=tuple(tuple(c) for c in record["classes"]),
            unverified=tuple(record.get("unverified", ())),
        )


_THINK_SPAN_RE = re.compile(r"<think>.*?</think>", re.DOTALL)
_FENCE_RE = re.compile(r"```[ \t]*([A-Za-z0-9_+-]*)[ \t]*\n(.*?)```", re.DOTALL)
_LEAN_LABELS = {"lean", "lean4"}


def strip_think(text: str) -> str:
    text = _THINK_SPAN_RE.sub("", text)
    # unmatched closing tag: the opening tag was part of the prompt prefix
    if "</think>" in text:
        text = text.rsplit("</think>", 1)[1]
    # unmatched opening tag: truncated reasoning, nothing after it is final
    if "<think>" in text:
        text = text.split("<think>", 1)[0]
    return text


def select_code_block(text: str) -> str:
    """Last lean-labelled fence, else last unlabelled fence with a theorem, else ``text``."""
    blocks = _FENCE_RE.findall(text)
    lean = [code for label, code in blocks if label.lower() in _LEAN_LABELS]
    if lean:
        return lean[-1]
    unlabeled = [code for label, code in blocks if not label and "theorem" in code]
    if unlabeled:
        return unlabeled[-1]
    return text


def _coerce_proof(body: str) -> str:
    m = re.search(r":=\s*by\b", body)
    if m is None:
        idx = body.rfind(":=")
        if idx < 0:
            raise MissingSorry("theorem has no `:=` proof separator")
        start = idx
    else:
        start = m.start()
    return body[:start].rstrip() + " := by sorry"


def extract_formal_statement(raw_model_output: str, coerce_sorry: bool = False) -> FormalStatement:
    """Parse the final Lean statement out of a raw model response.

    Think spans are dropped and the last ``lean``/``lean4`` fenced block wins;
    without fences the whole remaining text is parsed. Everything before the
    first column-0 ``theorem`` is header.

    Raises:
        NoTheoremFound, MultipleTheorems, MissingSorry
    """
    block = textwrap.dedent(select_code_block(strip_think(raw_model_output)))
    lines = block.splitlines()
    starts = [i for i, line in enumerate(lines) if _THEOREM_LINE_RE.match(line)]
    if not starts:
        raise NoTheoremFound("no top-level `theorem` declaration found")
    if len(starts) > 1:
        raise MultipleTheorems(f"{len(starts)} top-level theorems in the selected block")
    first = starts[0]
    header = "\n".join(lines[:first]).strip("\n")
    header = "\n".join(line.rstrip() for line in header.splitlines())
    body = "\n".join(lines[first:]).rstrip()
    if not _PROOF_TAIL_RE.search(body):
        if not coerce_sorry:
            raise MissingSorry("proof is not the `sorry` placeholder")
        body = _coerce_proof(body)
    name = _THEOREM_LINE_RE.match(lines[first]).group(1)
    return FormalStatement(header=header, theorem_name=name, body=body)


def canonicalize(text: str) -> str:
    """Collapse whitespace runs to single spaces and trim."""
    return " ".join(text.split())


def rename_theorem(s: FormalStatement, new_name: str) -> FormalStatement:
    if not is_identifier(new_name):
        raise InvalidIdentifier(new_name)
    if new_name == s.theorem_name:
        return s
    if new_name in header_declared_names(s.header):
        raise NameCollision(f"{new_name!r} is already declared in the header")
    m = _THEOREM_LINE_RE.search(s.body)
    assert m is not None
    body = s.body[: m.start(1)] + new_name + s.body[m.end(1):]
    return replace(s, theorem_name=new_name, body=body)


def fence(code: str, label: str = "lean4") -> str:
    return f"```{label}\n{code}\n```"


__all__ = [
    "Candidate",
    "CandidateSet",
    "EquivalencePartition",
    "FormalStatement",
    "InformalProblem",
    "InvalidIdentifier",
    "MissingSorry",
    "MultipleTheorems",
    "NameCollision",
    "NoTheoremFound",
    "ParseError",
    "ProblemType",
    "VerificationVerdict",
    "canonicalize",
    "extract_formal_statement",
    "fence",
    "header_declared_names",
    "is_identifier",
    "rename_theorem",
    "select_code_block",
    "strip_think",
]
