"""Deterministic stand-in for a Lean checker.

The mock understands just enough of the probe snippets produced by the BEq
engine to answer like a REPL: it validates declarations with a few surface
rules, resolves ``exact?`` goals against earlier ``sorry`` theorems using a
normalization table, and reports results in the REPL message format.
"""

from __future__ import annotations

import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from beqkit.core import FormalStatement, canonicalize
from beqkit.verifier.errors import BackendUnavailable, CheckTimeout

SLOW_MARKER = "mock_slow"
CRASH_MARKER = "mock_crash"
SYNTAX_ERROR_MARKER = "mock_syntax_error"

_DECL_START_RE = re.compile(
    r"^(?:@\[[^\]]*\]\s*)?(?:(?:noncomputable|private|protected)\s+)*"
    r"(def|abbrev|theorem|lemma|structure|inductive|class|instance|axiom|opaque)\s+([^\s:({\[⦃]+)"
)
_PROOF_SPLIT_RE = re.compile(r":=\s*(?=by\b|sorry\b)")
_REFL_RE = re.compile(r"^(.+?) = (.+)$")
_BRACKETS = {")": "(", "]": "[", "}": "{", "⟩": "⟨"}


@dataclass
class MockTable:
    """Rules that define what the mock checker accepts and proves.

    ``aliases`` maps a proposition (canonical text) to the representative it
    is equivalent to; chains are followed, so the induced relation is an
    equivalence by construction.
    """

    aliases: dict[str, str] = field(default_factory=dict)
    unknown_identifiers: frozenset[str] = frozenset({"Nat.ceil_div"})
    trivial: frozenset[str] = frozenset({"True"})
    report_terms: bool = True
    slow_delay_s: float = 3600.0
    delay_s: float = 0.0

    def canonical(self, proposition: str) -> str:
        key = canonicalize(proposition)
        seen = {key}
        while key in self.aliases:
            key = canonicalize(self.aliases[key])
            if key in seen:
                break
            seen.add(key)
        return key

    def is_trivial(self, proposition: str) -> bool:
        key = canonicalize(proposition)
        if key in self.trivial:
            return True
        m = _REFL_RE.match(key)
        return bool(m and m.group(1) == m.group(2))

    def equivalent(self, y1: FormalStatement, y2: FormalStatement) -> bool:
        return self.canonical(y1.proposition) == self.canonical(y2.proposition)

    @classmethod
    def load(cls, path: str | Path) -> "MockTable":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            aliases={canonicalize(k): canonicalize(v) for k, v in data.get("aliases", {}).items()},
            unknown_identifiers=frozenset(data.get("unknown_identifiers", ["Nat.ceil_div"])),
            trivial=frozenset(data.get("trivial", ["True"])),
            report_terms=data.get("report_terms", True),
            slow_delay_s=float(data.get("slow_delay_s", 3600.0)),
            delay_s=float(data.get("delay_s", 0.0)),
        )


def mock_equivalence_oracle(y1: FormalStatement, y2: FormalStatement, table: MockTable | None = None) -> bool:
    """Ground-truth equivalence as the mock checker sees it."""
    return (table or MockTable()).equivalent(y1, y2)


def _split_declarations(code: str) -> list[tuple[int, str, str, str]]:
    """Return (line, kind, name, text) for every column-0 declaration."""
    decls: list[tuple[int, str, str, list[str]]] = []
    for lineno, line in enumerate(code.splitlines(), start=1):
        m = _DECL_START_RE.match(line)
        if m:
            decls.append((lineno, m.group(1), m.group(2), [line]))
        elif decls and (line.startswith((" ", "\t")) or (line.strip() and not _is_command(line))):
            decls[-1][3].append(line)
        elif decls and not line.strip():
            decls[-1][3].append(line)
    return [(ln, kind, name, "\n".join(lines).strip()) for ln, kind, name, lines in decls]


def _is_command(line: str) -> bool:
    return line.startswith(("import ", "open ", "variable", "set_option", "namespace", "section", "end", "universe", "#", "--"))


def _syntax_problems(text: str, unknown: frozenset[str]) -> list[str]:
    problems = []
    stack = []
    for ch in text:
        if ch in "([{⟨":
            stack.append(ch)
        elif ch in _BRACKETS:
            if not stack or stack.pop() != _BRACKETS[ch]:
                problems.append(f"unexpected token '{ch}'")
                break
    if stack and not problems:
        problems.append("unexpected end of input; expected closing bracket")
    if re.search(r"=\s+=", text):
        problems.append("unexpected token '='; expected term")
    for ident in sorted(unknown):
        if re.search(rf"(?<![\w.]){re.escape(ident)}(?![\w.])", text):
            problems.append(f"unknown identifier '{ident}'")
    if SYNTAX_ERROR_MARKER in text:
        problems.append("unexpected token; expected command")
    return problems


class MockChecker:
    """Shared state of the mock backend; sessions forward here.

    Tracks call counts and the peak number of concurrent checks so tests can
    assert the pool bound.
    """

    def __init__(self, table: MockTable | None = None, crash_budget: int = 0):
        self.table = table or MockTable()
        self.crash_budget = crash_budget
        self.available = True
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()

    def run(self, code: str, timeout_s: float) -> dict:
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            crash = False
            if CRASH_MARKER in code and self.crash_budget > 0:
                self.crash_budget -= 1
                crash = True
        try:
            if not self.available or crash:
                raise BackendUnavailable("mock checker is down")
            delay = self.table.delay_s
            if SLOW_MARKER in code:
                delay = max(delay, self.table.slow_delay_s)
            if delay > 0:
                time.sleep(min(delay, timeout_s))
                if delay > timeout_s:
                    raise CheckTimeout(f"mock check exceeded {timeout_s}s")
            return self.respond(code)
        finally:
            with self._lock:
                self.in_flight -= 1

    def respond(self, code: str) -> dict:
        messages: list[dict] = []
        sorries: list[dict] = []
        usable: dict[str, str] = {}

        def msg(line: int, severity: str, data: str) -> None:
            messages.append({"severity": severity, "pos": {"line": line, "column": 0}, "data": data})

        decls = _split_declarations(code)
        if not decls and code.strip() and not all(_is_command(l) or not l.strip() for l in code.splitlines()):
            msg(1, "error", "unexpected token; expected command")
        for line, kind, name, text in decls:
            problems = _syntax_problems(text, self.table.unknown_identifiers)
            if kind not in ("theorem", "lemma"):
                for p in problems:
                    msg(line, "error", p)
                continue
            parts = _PROOF_SPLIT_RE.split(text, maxsplit=1)
            if len(parts) != 2:
                msg(line, "error", "unexpected end of input; expected ':='")
                continue
            head, proof = parts
            sig = head[_DECL_START_RE.match(head).end():].strip()
            prop = sig[1:].strip() if sig.startswith(":") else sig
            if not prop:
                problems.append("unexpected token ':='; expected ':'")
            if problems:
                for p in problems:
                    msg(line, "error", p)
                continue
            key = self.table.canonical(prop)
            proof = canonicalize(proof)
            if proof in ("sorry", "by sorry"):
                sorries.append({"pos": {"line": line, "column": 0}, "goal": f"⊢ {canonicalize(prop)}"})
                msg(line, "warning", "declaration uses 'sorry'")
                usable.setdefault(key, name)
            elif proof == "by exact?":
                term = None
                if self.table.is_trivial(prop):
                    term = "rfl"
                elif key in usable:
                    term = usable[key]
                if term is None:
                    msg(line, "error", "`exact?` could not close the goal. Try `apply?` to see partial suggestions.")
                elif self.table.report_terms:
                    msg(line, "info", f"Try this: exact {term}")
            elif not self.table.is_trivial(prop):
                msg(line, "error", "unsolved goals")
        return {"messages": messages, "sorries": sorries, "env": 0}


class MockSession:
    def __init__(self, checker: MockChecker):
        self.checker = checker

    def run(self, code: str, timeout_s: float) -> dict:
        return self.checker.run(code, timeout_s)

    def close(self) -> None:
        pass
