"""BEq checking, equivalence-class partitioning, majority voting and BEq@k."""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import sqlite3
import threading
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from beqkit.core import (
    CandidateSet,
    EquivalencePartition,
    FormalStatement,
    VerificationVerdict,
    canonicalize,
    header_declared_names,
)
from beqkit.verifier import Verifier

logger = logging.getLogger(__name__)

HYP_NAME = "beq_hyp"
GOAL_NAME = "beq_goal"

_BLOCK_START_RE = re.compile(
    r"^(?:import|open|export|variable|universe|set_option|namespace|section|end|noncomputable|private|protected|"
    r"def|abbrev|theorem|lemma|structure|inductive|class|instance|axiom|opaque|attribute|notation|macro|local|"
    r"scoped|@\[|#|--|/-)"
)
_HYP_REF_RE = re.compile(rf"(?<![\w.']){HYP_NAME}(?![\w'])")


class HeaderConflict(ValueError):
    """Two headers declare the same name with different definitions."""


class KOutOfRange(ValueError):
    pass


def _header_blocks(header: str) -> list[str]:
    blocks: list[list[str]] = []
    for line in header.splitlines():
        if not line.strip():
            blocks.append([])
            continue
        if blocks and blocks[-1] and not _BLOCK_START_RE.match(line):
            blocks[-1].append(line.rstrip())
        else:
            blocks.append([line.rstrip()])
    return ["\n".join(b) for b in blocks if b]


def merge_headers(*headers: str) -> str:
    """Deduplicated union of header blocks, imports first.

    Blocks are compared modulo whitespace. A declaration name that appears in
    two headers with different text raises :class:`HeaderConflict`.
    """
    imports: list[str] = []
    rest: list[str] = []
    seen: set[str] = set()
    decls: dict[str, str] = {}
    for header in headers:
        for block in _header_blocks(header):
            key = canonicalize(block)
            if key in seen:
                continue
            for name in header_declared_names(block):
                if name in decls and decls[name] != key:
                    raise HeaderConflict(f"conflicting definitions of {name!r}")
                decls[name] = key
            seen.add(key)
            (imports if block.startswith("import ") else rest).append(block)
    for reserved in (HYP_NAME, GOAL_NAME):
        if reserved in decls:
            raise HeaderConflict(f"header declares reserved name {reserved!r}")
    parts = []
    if imports:
        parts.append("\n".join(imports))
    if rest:
        parts.append("\n\n".join(rest))
    return "\n\n".join(parts)


def build_direction_probe(assumed: FormalStatement, target: FormalStatement) -> str:
    """Snippet asking the checker to derive ``target`` from ``assumed``.

    ``assumed`` is admitted with ``sorry`` under the reserved name ``beq_hyp``
    and ``target`` is stated as ``beq_goal`` with ``exact?`` as its proof.
    """
    header = merge_headers(assumed.header, target.header)
    hyp = assumed.with_proof(HYP_NAME, "by sorry")
    goal = target.with_proof(GOAL_NAME, "by exact?")
    return "\n\n".join(p for p in (header, hyp, goal) if p)


def _goal_only_probe(assumed: FormalStatement, target: FormalStatement) -> str:
    header = merge_headers(assumed.header, target.header)
    goal = target.with_proof(GOAL_NAME, "by exact?")
    return "\n\n".join(p for p in (header, goal) if p)


@dataclass(frozen=True)
class BeqOutcome:
    forward: bool
    backward: bool
    forward_verdict: VerificationVerdict | None = None
    backward_verdict: VerificationVerdict | None = None

    @property
    def equivalent(self) -> bool:
        return self.forward and self.backward

    def swapped(self) -> "BeqOutcome":
        return BeqOutcome(self.backward, self.forward, self.backward_verdict, self.forward_verdict)

    @property
    def timed_out(self) -> bool:
        return any(v is not None and v.timed_out for v in (self.forward_verdict, self.backward_verdict))

    def to_json(self) -> dict:
        return {
            "forward": self.forward,
            "backward": self.backward,
            "equivalent": self.equivalent,
            "forward_verdict": self.forward_verdict.to_json() if self.forward_verdict else None,
            "backward_verdict": self.backward_verdict.to_json() if self.backward_verdict else None,
        }

    @classmethod
    def from_json(cls, record: dict) -> "BeqOutcome":
        fv, bv = record.get("forward_verdict"), record.get("backward_verdict")
        return cls(
            bool(record["forward"]),
            bool(record["backward"]),
            VerificationVerdict.from_json(fv) if fv else None,
            VerificationVerdict.from_json(bv) if bv else None,
        )


def pair_key(y1: FormalStatement, y2: FormalStatement) -> tuple[str, str, bool]:
    """Unordered cache key plus whether (y1, y2) is in key order."""
    a, b = canonicalize(y1.full_text), canonicalize(y2.full_text)
    return (a, b, True) if a <= b else (b, a, False)


class EquivalenceCache:
    """Thread-safe BEq outcome cache keyed on the unordered canonical pair.

    With ``path`` set, outcomes are also written to a SQLite file so later
    runs (and the reward service) start warm.
    """

    def __init__(self, path: str | Path | None = None):
        self._mem: dict[tuple[str, str], BeqOutcome] = {}
        self._lock = threading.Lock()
        self._db: sqlite3.Connection | None = None
        self.hits = 0
        self.misses = 0
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._db = sqlite3.connect(str(path), check_same_thread=False)
            self._db.execute(
                "CREATE TABLE IF NOT EXISTS beq (ka TEXT, kb TEXT, outcome TEXT, PRIMARY KEY (ka, kb))"
            )
            self._db.commit()

    @staticmethod
    def _digest(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def get(self, y1: FormalStatement, y2: FormalStatement) -> BeqOutcome | None:
        a, b, ordered = pair_key(y1, y2)
        with self._lock:
            outcome = self._mem.get((a, b))
            if outcome is None and self._db is not None:
                row = self._db.execute(
                    "SELECT outcome FROM beq WHERE ka = ? AND kb = ?", (self._digest(a), self._digest(b))
                ).fetchone()
                if row is not None:
                    outcome = BeqOutcome.from_json(json.loads(row[0]))
                    self._mem[(a, b)] = outcome
            if outcome is None:
                self.misses += 1
                return None
            self.hits += 1
        return outcome if ordered else outcome.swapped()

    def put(self, y1: FormalStatement, y2: FormalStatement, outcome: BeqOutcome) -> None:
        a, b, ordered = pair_key(y1, y2)
        stored = outcome if ordered else outcome.swapped()
        with self._lock:
            self._mem[(a, b)] = stored
            if self._db is not None:
                self._db.execute(
                    "INSERT OR REPLACE INTO beq VALUES (?, ?, ?)",
                    (self._digest(a), self._digest(b), json.dumps(stored.to_json())),
                )
                self._db.commit()

    def __len__(self) -> int:
        return len(self._mem)

    def close(self) -> None:
        with self._lock:
            if self._db is not None:
                self._db.close()
                self._db = None


class BeqEngine:
    """Runs BEq checks through a :class:`Verifier` with caching.

    Both directions of a pair run concurrently when the verifier has more than
    one worker; with a single worker the backward direction is skipped once
    the forward one has failed.
    """

    def __init__(self, verifier: Verifier, cache: EquivalenceCache | None = None, timeout_s: int | None = None):
        self.verifier = verifier
        self.cache = cache if cache is not None else EquivalenceCache()
        self.timeout_s = timeout_s or verifier.default_timeout_s
        self.beq_calls = 0
        self._pool = ThreadPoolExecutor(max_workers=2) if verifier.worker_count > 1 else None
        self._count_lock = threading.Lock()

    def syntax_check(self, s: FormalStatement) -> VerificationVerdict:
        return self.verifier.syntax_check(s, self.timeout_s)

    def check_direction(self, assumed: FormalStatement, target: FormalStatement) -> tuple[bool, VerificationVerdict]:
        try:
            probe = build_direction_probe(assumed, target)
        except HeaderConflict as exc:
            return False, VerificationVerdict(False, diagnostics=(f"header conflict: {exc}",))
        verdict = self.verifier.check(probe, self.timeout_s)
        if not verdict.passed:
            return False, verdict
        suggestions = [d for d in verdict.diagnostics if d.lstrip().startswith("Try this:")]
        if suggestions:
            return any(_HYP_REF_RE.search(s) for s in suggestions), verdict
        # no closing term reported: the goal must fail without the hypothesis
        alone = self.verifier.check(_goal_only_probe(assumed, target), self.timeout_s)
        return (not alone.passed and not alone.timed_out), verdict

    def check_beq(self, y1: FormalStatement, y2: FormalStatement) -> BeqOutcome:
        with self._count_lock:
            self.beq_calls += 1
        cached = self.cache.get(y1, y2)
        if cached is not None:
            return cached
        if self._pool is not None:
            fwd = self._pool.submit(self.check_direction, y1, y2)
            bwd = self._pool.submit(self.check_direction, y2, y1)
            (f_ok, f_v), (b_ok, b_v) = fwd.result(), bwd.result()
        else:
            f_ok, f_v = self.check_direction(y1, y2)
            b_ok, b_v = self.check_direction(y2, y1) if f_ok else (False, None)
        outcome = BeqOutcome(f_ok, b_ok, f_v, b_v)
        if not outcome.timed_out:
            self.cache.put(y1, y2, outcome)
        return outcome

    def syntax_filter(self, cands: Sequence[FormalStatement | None]) -> list[bool]:
        return [c is not None and self.syntax_check(c).passed for c in cands]

    def partition_candidates(
        self,
        cands: Sequence[FormalStatement | None],
        syntax_ok: Sequence[bool] | None = None,
    ) -> EquivalencePartition:
        """Cluster candidates against one representative per class.

        Each candidate joins the first class (in creation order) whose
        representative is BEq to it, otherwise it founds a new class.
        Entries that are ``None`` or flagged in ``syntax_ok`` as failing go to
        ``unverified``.
        """
        if syntax_ok is None:
            syntax_ok = [c is not None for c in cands]
        classes: list[list[int]] = []
        unverified: list[int] = []
        for i, cand in enumerate(cands):
            if cand is None or not syntax_ok[i]:
                unverified.append(i)
                continue
            for members in classes:
                rep = cands[members[0]]
                assert rep is not None
                if self.check_beq(rep, cand).equivalent:
                    members.append(i)
                    break
            else:
                classes.append([i])
        return EquivalencePartition(tuple(tuple(c) for c in classes), tuple(unverified))

    def majority_vote(self, cset: CandidateSet, k: int, seed: int) -> "Selection":
        cands = [c.parsed for c in cset.candidates[:k]]
        syntax = [self.syntax_check(c) if c is not None else None for c in cands]
        ok = [v is not None and v.passed for v in syntax]
        partition = self.partition_candidates(cands, ok)
        index = majority_select(partition, cands, problem_seed(seed, cset.problem_id))
        return Selection(cset.problem_id, partition, index, tuple(syntax))

    def maj_at_k(
        self,
        candidate_sets: Sequence[CandidateSet],
        ground_truths: Sequence[FormalStatement],
        k: int,
        seed: int,
    ) -> Fraction:
        """Share of problems whose majority-voted candidate is BEq to ground truth."""
        if len(candidate_sets) != len(ground_truths):
            raise ValueError("one ground truth per candidate set is required")
        if not candidate_sets:
            return Fraction(0)
        hits = 0
        for cset, gt in zip(candidate_sets, ground_truths):
            sel = self.majority_vote(cset, k, seed)
            if sel.index is None:
                continue
            winner = cset.candidates[sel.index].parsed
            assert winner is not None
            hits += self.check_beq(winner, gt).equivalent
        return Fraction(hits, len(candidate_sets))

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)


@dataclass(frozen=True)
class Selection:
    problem_id: str
    partition: EquivalencePartition
    index: int | None
    syntax: tuple[VerificationVerdict | None, ...] = ()

    @property
    def class_sizes(self) -> list[int]:
        return [len(c) for c in self.partition.classes]


def problem_seed(seed: int, problem_id: str) -> str:
    return f"{seed}:{problem_id}"


def majority_select(p: EquivalencePartition, cands: Sequence | None = None, seed: int | str = 0) -> int | None:
    """Pick a uniformly random member of the largest class.

    Ties between equally large classes go to the class holding the smallest
    candidate index. The member draw is reproducible for a given ``seed``.
    """
    if not p.classes:
        return None
    best = min(p.classes, key=lambda c: (-len(c), min(c)))
    members = sorted(best)
    return members[random.Random(seed).randrange(len(members))]


@dataclass(frozen=True)
class VerdictMatrix:
    """Row i, column j: attempt j of sample i is BEq to its ground truth."""

    rows: tuple[tuple[bool, ...], ...]

    def __post_init__(self) -> None:
        if not self.rows or not self.rows[0]:
            raise ValueError("verdict matrix needs at least one row and one column")
        width = len(self.rows[0])
        if any(len(r) != width for r in self.rows):
            raise ValueError("verdict matrix must be rectangular")

    @classmethod
    def of(cls, rows: Sequence[Sequence[bool | int]]) -> "VerdictMatrix":
        return cls(tuple(tuple(bool(x) for x in r) for r in rows))

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def cols(self) -> int:
        return len(self.rows[0])


def beq_at_k(m: VerdictMatrix, k: int) -> Fraction:
    if not 1 <= k <= m.cols:
        raise KOutOfRange(f"k={k} outside 1..{m.cols}")
    return Fraction(sum(any(row[:k]) for row in m.rows), m.n)
