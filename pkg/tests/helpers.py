"""Builders shared by the test modules."""

from __future__ import annotations

from beqkit.beq import BeqEngine
from beqkit.core import FormalStatement, extract_formal_statement
from beqkit.verifier import MockTable, mock_verifier


def stmt(prop: str, name: str = "t", header: str = "", binders: str = "") -> FormalStatement:
    sig = f"{binders} : {prop}" if binders else f": {prop}"
    body = f"theorem {name} {sig} := by sorry"
    return extract_formal_statement(f"{header}\n\n{body}" if header else body)


def engine_for(table: MockTable | None = None, workers: int = 1, timeout_s: int = 60) -> BeqEngine:
    return BeqEngine(mock_verifier(table, worker_count=workers, default_timeout_s=timeout_s))


def connected_components(n: int, related) -> list[set[int]]:
    """Union-find over all pairs; ``related(i, j)`` is the edge predicate."""
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if related(i, j):
                parent[find(j)] = find(i)
    groups: dict[int, set[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return list(groups.values())
