"""Corpus construction: rule filtering, proof-form rewriting, decontamination
and SFT record formatting."""

from __future__ import annotations

import enum
import json
import re
import threading
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import IO

from beqkit.core import (
    FormalStatement,
    InformalProblem,
    ParseError,
    ProblemType,
    canonicalize,
    extract_formal_statement,
    fence,
    select_code_block,
)
from beqkit.gateway.prompts import build_autoformalization_prompt

EXCLUDED_TYPES = frozenset({ProblemType.GEOMETRY, ProblemType.COMBINATORICS})
# digits, commas and parentheses, widened to admit decimals, signs and fractions
NUMERIC_ANSWER_RE = re.compile(r"^[0-9,().\-/\s]+$")
PROOF_FORM_PHRASE = "Show that it is"

_SUBQUESTION_MARKERS = (
    re.compile(r"\(a\).*\(b\)", re.DOTALL),
    re.compile(r"\(1\).*\(2\)", re.DOTALL),
    re.compile(r"\(i\).*\(ii\)", re.DOTALL | re.IGNORECASE),
    re.compile(r"(?:^|\n)\s*a[.)]\s.*\n\s*b[.)]\s", re.DOTALL),
)


class FilterRule(str, enum.Enum):
    INCOMPLETE = "Incomplete"
    MULTI_SUB_QUESTION = "MultiSubQuestion"
    EXCLUDED_TYPE = "ExcludedType"
    NON_NUMERIC_ANSWER = "NonNumericAnswer"
    KEPT = "Kept"


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    rule_fired: FilterRule
    detail: str = ""

    def __post_init__(self) -> None:
        if self.keep != (self.rule_fired is FilterRule.KEPT):
            raise ValueError("keep must be true exactly when the rule is Kept")


def has_multiple_subquestions(text: str) -> bool:
    return any(p.search(text) for p in _SUBQUESTION_MARKERS)


def is_numeric_answer(answer: str | None) -> bool:
    return answer is not None and bool(NUMERIC_ANSWER_RE.match(answer)) and any(c.isdigit() for c in answer)


def filter_informal(p: InformalProblem, detect_subquestions: bool = False) -> FilterDecision:
    """Apply the three selection rules in order and report the first that fails."""
    if p.is_valid_flag is False:
        return FilterDecision(False, FilterRule.INCOMPLETE, "dataset marks the problem as invalid")
    if detect_subquestions and has_multiple_subquestions(p.text):
        return FilterDecision(False, FilterRule.MULTI_SUB_QUESTION, "enumerated sub-question markers")
    if p.problem_type in EXCLUDED_TYPES:
        return FilterDecision(False, FilterRule.EXCLUDED_TYPE, p.problem_type.value)
    if p.is_proof:
        return FilterDecision(True, FilterRule.KEPT, "proof problem")
    if not is_numeric_answer(p.answer):
        return FilterDecision(False, FilterRule.NON_NUMERIC_ANSWER, f"answer {p.answer!r}")
    return FilterDecision(True, FilterRule.KEPT, "numeric answer")


class MissingAnswer(ValueError):
    pass


class AlreadyProof(ValueError):
    pass


def to_proof_form(
    p: InformalProblem,
    phrase: str = PROOF_FORM_PHRASE,
    separator: str = " ",
    allow_proof: bool = False,
) -> InformalProblem:
    """Turn a calculation problem into a proof problem about its answer."""
    if p.is_proof:
        if allow_proof:
            return p
        raise AlreadyProof(f"{p.id!r} is already a proof problem")
    if not p.answer or not p.answer.strip():
        raise MissingAnswer(p.id)
    text = f"{p.text.rstrip()}{separator}{phrase} {p.answer.strip()}."
    return replace(p, text=text, is_proof=True)


class StageLog:
    """Append-only JSONL log of per-record stage decisions."""

    def __init__(self, sink: IO[str] | None = None):
        self._sink = sink
        self._lock = threading.Lock()
        self.entries: list[dict] = []

    def record(self, id_: str, stage: str, decision: str, rule: str) -> None:
        entry = {"id": id_, "stage": stage, "decision": decision, "rule": rule}
        with self._lock:
            self.entries.append(entry)
            if self._sink is not None:
                self._sink.write(json.dumps(entry, ensure_ascii=False) + "\n")
                self._sink.flush()

    def dropped(self, stage: str | None = None) -> list[dict]:
        return [e for e in self.entries if e["decision"] == "drop" and (stage is None or e["stage"] == stage)]


def prepare_problems(
    problems: Iterable[InformalProblem],
    log: StageLog | None = None,
    detect_subquestions: bool = False,
    phrase: str = PROOF_FORM_PHRASE,
) -> tuple[list[InformalProblem], list[InformalProblem]]:
    """Filter, then rewrite kept calculation problems into proof form."""
    kept, dropped = [], []
    for p in problems:
        decision = filter_informal(p, detect_subquestions)
        if log is not None:
            log.record(p.id, "filter", "keep" if decision.keep else "drop", decision.rule_fired.value)
        if decision.keep:
            kept.append(p if p.is_proof else to_proof_form(p, phrase))
        else:
            dropped.append(p)
    return kept, dropped


_TOKEN_RE = re.compile(r"[^\W_]+")
_MOD = (1 << 61) - 1
_BASE = 1_000_003


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class NgramIndex:
    """Rolling-hash set of the token n-grams of a reference corpus.

    Hash hits are confirmed against the stored token window, so collisions
    never cause a false match.
    """

    def __init__(self, texts: Iterable[str], n: int = 13):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.n = n
        self._ids: dict[str, int] = {}
        self._docs: list[list[int]] = []
        self._table: dict[int, list[tuple[int, int]]] = {}
        for text in texts:
            self._add(text)

    def _encode(self, tokens: list[str], grow: bool) -> list[int]:
        out = []
        for t in tokens:
            tid = self._ids.get(t)
            if tid is None:
                if not grow:
                    out.append(-1)
                    continue
                tid = self._ids[t] = len(self._ids) + 1
            out.append(tid)
        return out

    def _hashes(self, ids: list[int]) -> Iterable[tuple[int, int]]:
        n = self.n
        if len(ids) < n:
            return
        top = pow(_BASE, n - 1, _MOD)
        h = 0
        for t in ids[:n]:
            h = (h * _BASE + t) % _MOD
        yield 0, h
        for i in range(1, len(ids) - n + 1):
            h = ((h - ids[i - 1] * top) * _BASE + ids[i + n - 1]) % _MOD
            yield i, h

    def _add(self, text: str) -> None:
        ids = self._encode(tokenize(text), grow=True)
        doc = len(self._docs)
        self._docs.append(ids)
        for start, h in self._hashes(ids):
            refs = self._table.setdefault(h, [])
            window = ids[start:start + self.n]
            if not any(self._docs[d][s:s + self.n] == window for d, s in refs):
                refs.append((doc, start))

    def find(self, text: str) -> tuple[str, ...] | None:
        """First n-gram of ``text`` that also occurs in the index, if any."""
        tokens = tokenize(text)
        ids = self._encode(tokens, grow=False)
        for start, h in self._hashes(ids):
            refs = self._table.get(h)
            if not refs:
                continue
            window = ids[start:start + self.n]
            if -1 in window:
                continue
            if any(self._docs[d][s:s + self.n] == window for d, s in refs):
                return tuple(tokens[start:start + self.n])
        return None

    def __len__(self) -> int:
        return sum(len(r) for r in self._table.values())


def ngram_decontaminate(
    train: Sequence[InformalProblem],
    eval_set: Sequence[InformalProblem],
    n: int = 13,
    log: StageLog | None = None,
) -> tuple[list[InformalProblem], list[InformalProblem]]:
    """Drop training problems sharing any contiguous n-token window with an eval problem."""
    index = NgramIndex((p.text for p in eval_set), n)
    kept, dropped = [], []
    for p in train:
        hit = index.find(p.text)
        if log is not None:
            log.record(p.id, "decontaminate", "drop" if hit else "keep", f"{n}-gram" if hit else "Kept")
        (dropped if hit else kept).append(p)
    return kept, dropped


def normalize_name(name: str) -> str:
    return canonicalize(name).lower()


def dedup_by_name(
    train: Sequence,
    eval_set: Sequence,
    key: Callable[[object], str] = lambda r: r.id,
    log: StageLog | None = None,
) -> tuple[list, list]:
    names = {normalize_name(key(r)) for r in eval_set}
    kept, dropped = [], []
    for r in train:
        hit = normalize_name(key(r)) in names
        if log is not None:
            log.record(key(r), "dedup", "drop" if hit else "keep", "NameOverlap" if hit else "Kept")
        (dropped if hit else kept).append(r)
    return kept, dropped


class SftStage(str, enum.Enum):
    STAGE1_KNOWLEDGE = "stage1"
    STAGE2_REASONING = "stage2"


EMPTY_THINK = "<think></think>"


@dataclass(frozen=True)
class SftRecord:
    prompt: str
    response: str
    stage: SftStage

    def __post_init__(self) -> None:
        if self.stage is SftStage.STAGE1_KNOWLEDGE and not self.response.startswith(EMPTY_THINK):
            raise ValueError("stage-1 responses start with an empty think span")
        if self.stage is SftStage.STAGE2_REASONING and not (
            self.response.startswith("<think>") and "</think>" in self.response
        ):
            raise ValueError("stage-2 responses wrap the trajectory in think tags")

    def to_json(self) -> dict[str, str]:
        return {"prompt": self.prompt, "response": self.response, "stage": self.stage.value}

    @classmethod
    def from_json(cls, record: dict) -> "SftRecord":
        return cls(record["prompt"], record["response"], SftStage(record["stage"]))


class TrajectoryInconsistent(ValueError):
    pass


def header_hint_for(y: FormalStatement) -> str | None:
    """The header is worth hinting when it holds more than import lines."""
    lines = [l for l in y.header.splitlines() if l.strip()]
    if any(not l.startswith("import ") for l in lines):
        return y.header
    return None


def _prompt_for(x: InformalProblem, y: FormalStatement, header_hint: str | None | bool, forbid_proof: bool) -> str:
    if header_hint is True or header_hint == "auto":
        hint = header_hint_for(y)
    elif header_hint is False:
        hint = None
    else:
        hint = header_hint
    return build_autoformalization_prompt(x, hint, forbid_proof)


def format_sft_stage1(
    x: InformalProblem,
    y: FormalStatement,
    header_hint: str | None | bool = "auto",
    forbid_proof: bool = False,
) -> SftRecord:
    response = f"{EMPTY_THINK}\n{fence(y.full_text)}"
    return SftRecord(_prompt_for(x, y, header_hint, forbid_proof), response, SftStage.STAGE1_KNOWLEDGE)


def trajectory_statement(trajectory: str) -> FormalStatement:
    """The statement in the final code block of a reasoning trajectory."""
    block = select_code_block(trajectory)
    if block is trajectory:
        raise TrajectoryInconsistent("trajectory contains no final code block")
    try:
        return extract_formal_statement(fence(block))
    except ParseError as exc:
        raise TrajectoryInconsistent(f"final code block does not parse: {exc}") from exc


def format_sft_stage2(
    x: InformalProblem,
    trajectory: str,
    y: FormalStatement,
    header_hint: str | None | bool = "auto",
    forbid_proof: bool = False,
) -> SftRecord:
    trajectory = trajectory.strip()
    if not trajectory:
        raise TrajectoryInconsistent("empty trajectory")
    if "<think>" in trajectory or "</think>" in trajectory:
        raise TrajectoryInconsistent("trajectory must not contain think tags")
    final = trajectory_statement(trajectory)
    if canonicalize(final.full_text) != canonicalize(y.full_text):
        raise TrajectoryInconsistent("final code in the trajectory differs from the statement")
    response = f"<think>{trajectory}</think>\n{fence(y.full_text)}"
    return SftRecord(_prompt_for(x, y, header_hint, forbid_proof), response, SftStage.STAGE2_REASONING)


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")
            count += 1
    return count
