"""Benchmark harness: BEq@k / Maj@k reports with checkpointed, resumable runs."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from collections import Counter
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any

from beqkit.beq import BeqEngine, VerdictMatrix, beq_at_k, majority_select, problem_seed
from beqkit.core import (
    CandidateSet,
    EquivalencePartition,
    FormalStatement,
    InformalProblem,
    ParseError,
)
from beqkit.gateway import (
    ChatClient,
    GatewayError,
    GenerationConfig,
    UnparseableVerdict,
    build_error_classifier_prompt,
    generate_candidates,
    parse_error_class,
)

logger = logging.getLogger(__name__)

UNCLASSIFIED = "unclassified"


class CorruptBenchmark(ValueError):
    pass


class InconsistentReport(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkItem:
    id: str
    informal: InformalProblem
    ground_truth: FormalStatement
    header_hint: str | None = None

    @classmethod
    def from_json(cls, record: dict[str, Any]) -> "BenchmarkItem":
        id_ = str(record["id"])
        informal = record["informal"]
        if isinstance(informal, dict):
            problem = InformalProblem.from_json({"id": id_, **informal})
        else:
            problem = InformalProblem(id=id_, text=informal)
        try:
            gt = FormalStatement.from_json(
                {"header": (record.get("ground_truth_header") or "").strip("\n"), "body": record["ground_truth"].strip()}
            )
        except (ValueError, ParseError) as exc:
            raise CorruptBenchmark(f"item {id_}: malformed ground truth: {exc}") from exc
        return cls(id_, problem, gt, record.get("header_hint") or None)

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "informal": self.informal.text,
            "ground_truth_header": self.ground_truth.header,
            "ground_truth": self.ground_truth.body,
            "header_hint": self.header_hint,
        }


def load_benchmark(records: Iterable[dict], engine: BeqEngine | None = None) -> list[BenchmarkItem]:
    """Parse benchmark records; with an engine, every ground truth must pass the checker."""
    items = [BenchmarkItem.from_json(r) for r in records]
    ids = [i.id for i in items]
    if len(set(ids)) != len(ids):
        raise CorruptBenchmark("duplicate item ids")
    if engine is not None:
        bad = [i.id for i in items if not engine.syntax_check(i.ground_truth).passed]
        if bad:
            raise CorruptBenchmark(f"ground truths fail the checker: {', '.join(bad)}")
    return items


@dataclass(frozen=True)
class Attempt:
    raw_output: str
    statement: FormalStatement | None = None
    parse_error: str | None = None
    syntax_ok: bool = False
    diagnostics: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {
            "raw_output": self.raw_output,
            "statement": self.statement.to_json() if self.statement else None,
            "parse_error": self.parse_error,
            "syntax_ok": self.syntax_ok,
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_json(cls, r: dict[str, Any]) -> "Attempt":
        return cls(
            r["raw_output"],
            FormalStatement.from_json(r["statement"]) if r.get("statement") else None,
            r.get("parse_error"),
            bool(r.get("syntax_ok")),
            tuple(r.get("diagnostics", ())),
        )


@dataclass(frozen=True)
class ItemResult:
    id: str
    attempts: tuple[Attempt, ...]
    verdicts: tuple[bool, ...]
    selected_index: int | None = None
    maj_correct: bool | None = None
    partition: EquivalencePartition | None = None
    error: str | None = None
    error_classes: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "attempts": [a.to_json() for a in self.attempts],
            "verdicts": list(self.verdicts),
            "selected_index": self.selected_index,
            "maj_correct": self.maj_correct,
            "partition": self.partition.to_json() if self.partition else None,
            "error": self.error,
            "error_classes": list(self.error_classes),
        }

    @classmethod
    def from_json(cls, r: dict[str, Any]) -> "ItemResult":
        return cls(
            id=r["id"],
            attempts=tuple(Attempt.from_json(a) for a in r["attempts"]),
            verdicts=tuple(bool(v) for v in r["verdicts"]),
            selected_index=r.get("selected_index"),
            maj_correct=r.get("maj_correct"),
            partition=EquivalencePartition.from_json(r["partition"]) if r.get("partition") else None,
            error=r.get("error"),
            error_classes=tuple(r.get("error_classes", ())),
        )


def _ratio(x: Fraction) -> float:
    return float(x)


@dataclass(frozen=True)
class EvalReport:
    benchmark_name: str
    n_items: int
    k: int
    beq_at: dict[int, float]
    maj_at_k: float | None
    per_item: tuple[ItemResult, ...]
    error_histogram: dict[str, int] = field(default_factory=dict)
    config_fingerprint: str = ""
    model_id: str = ""

    @classmethod
    def build(
        cls,
        benchmark_name: str,
        k: int,
        per_item: Sequence[ItemResult],
        config_fingerprint: str,
        model_id: str = "",
        with_maj: bool = True,
        extra_ks: Iterable[int] = (),
    ) -> "EvalReport":
        beq_at, maj = _aggregate(per_item, k, with_maj, extra_ks)
        return cls(benchmark_name, len(per_item), k, beq_at, maj, tuple(per_item), {}, config_fingerprint, model_id)

    def validate(self) -> None:
        """Recompute every aggregate from the per-item verdicts."""
        if self.n_items != len(self.per_item):
            raise InconsistentReport("n_items does not match per_item")
        if 1 not in self.beq_at or self.k not in self.beq_at:
            raise InconsistentReport("beq_at must report 1 and k")
        extra = [j for j in self.beq_at if j not in (1, self.k)]
        beq_at, maj = _aggregate(self.per_item, self.k, self.maj_at_k is not None, extra)
        if beq_at != self.beq_at:
            raise InconsistentReport(f"stored beq_at {self.beq_at} != recomputed {beq_at}")
        if maj != self.maj_at_k:
            raise InconsistentReport(f"stored maj_at_k {self.maj_at_k} != recomputed {maj}")
        values = [self.beq_at[j] for j in sorted(self.beq_at)]
        if any(a > b for a, b in zip(values, values[1:])):
            raise InconsistentReport("beq_at is not monotone in k")
        for item in self.per_item:
            if item.selected_index is None or item.partition is None:
                continue
            sizes = [len(c) for c in item.partition.classes]
            owner = next((c for c in item.partition.classes if item.selected_index in c), None)
            if owner is None or len(owner) != max(sizes):
                raise InconsistentReport(f"item {item.id}: selection is not in a maximal class")

    def category_histogram(self) -> dict[str, int]:
        out: Counter[str] = Counter()
        for key, count in self.error_histogram.items():
            out[key.split(" / ", 1)[0]] += count
        return dict(out)

    def to_json(self) -> dict[str, Any]:
        return {
            "benchmark_name": self.benchmark_name,
            "model_id": self.model_id,
            "n_items": self.n_items,
            "k": self.k,
            "beq_at": {str(j): v for j, v in sorted(self.beq_at.items())},
            "maj_at_k": self.maj_at_k,
            "per_item": [i.to_json() for i in self.per_item],
            "error_histogram": dict(sorted(self.error_histogram.items())),
            "config_fingerprint": self.config_fingerprint,
        }

    @classmethod
    def from_json(cls, r: dict[str, Any], validate: bool = True) -> "EvalReport":
        report = cls(
            benchmark_name=r["benchmark_name"],
            n_items=int(r["n_items"]),
            k=int(r["k"]),
            beq_at={int(j): float(v) for j, v in r["beq_at"].items()},
            maj_at_k=r.get("maj_at_k"),
            per_item=tuple(ItemResult.from_json(i) for i in r["per_item"]),
            error_histogram={str(k_): int(v) for k_, v in r.get("error_histogram", {}).items()},
            config_fingerprint=r.get("config_fingerprint", ""),
            model_id=r.get("model_id", ""),
        )
        if validate:
            report.validate()
        return report


def _aggregate(
    per_item: Sequence[ItemResult], k: int, with_maj: bool, extra_ks: Iterable[int] = ()
) -> tuple[dict[int, float], float | None]:
    ks = sorted({1, k, *extra_ks})
    if not per_item:
        return {j: 0.0 for j in ks}, (0.0 if with_maj else None)
    m = VerdictMatrix.of([_padded(i.verdicts, k) for i in per_item])
    beq_at = {j: _ratio(beq_at_k(m, j)) for j in ks}
    maj = None
    if with_maj:
        maj = _ratio(Fraction(sum(bool(i.maj_correct) for i in per_item), len(per_item)))
    return beq_at, maj


def _padded(verdicts: Sequence[bool], k: int) -> list[bool]:
    return list(verdicts[:k]) + [False] * (k - len(verdicts))


def config_fingerprint(settings: dict[str, Any]) -> str:
    blob = json.dumps(settings, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def evaluate_item(
    item: BenchmarkItem,
    client: ChatClient,
    engine: BeqEngine,
    cfg: GenerationConfig,
    k: int,
    seed: int,
    with_maj: bool = True,
    forbid_proof: bool = False,
) -> ItemResult:
    cset = generate_candidates(item.informal, replace(cfg, n_samples=k), client, item.header_hint, forbid_proof)
    return score_candidates(item, cset, engine, k, seed, with_maj)


def score_candidates(
    item: BenchmarkItem,
    cset: CandidateSet,
    engine: BeqEngine,
    k: int,
    seed: int,
    with_maj: bool = True,
) -> ItemResult:
    attempts: list[Attempt] = []
    verdicts: list[bool] = []
    for cand in cset.candidates[:k]:
        if cand.parsed is None:
            attempts.append(Attempt(cand.raw_output, None, cand.parse_error))
            verdicts.append(False)
            continue
        syntax = engine.syntax_check(cand.parsed)
        attempts.append(Attempt(cand.raw_output, cand.parsed, None, syntax.passed, syntax.diagnostics))
        verdicts.append(syntax.passed and engine.check_beq(cand.parsed, item.ground_truth).equivalent)
    selected = maj_ok = partition = None
    if with_maj:
        stmts = [a.statement for a in attempts]
        partition = engine.partition_candidates(stmts, [a.syntax_ok for a in attempts])
        selected = majority_select(partition, stmts, problem_seed(seed, item.id))
        # the winner's check against the ground truth is the cached verdict above
        maj_ok = selected is not None and verdicts[selected]
    return ItemResult(item.id, tuple(attempts), tuple(verdicts), selected, maj_ok, partition)


class Checkpoint:
    """Append-only JSONL of finished items, guarded by the run fingerprint."""

    def __init__(self, path: str | Path, fingerprint: str):
        self.path = Path(path)
        self.fingerprint = fingerprint
        self._lock = threading.Lock()

    def load(self) -> dict[str, ItemResult]:
        if not self.path.exists():
            return {}
        done: dict[str, ItemResult] = {}
        with open(self.path, encoding="utf-8") as fh:
            for n, line in enumerate(fh):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    logger.warning("ignoring truncated checkpoint line %d", n + 1)
                    continue
                if n == 0:
                    if record.get("fingerprint") != self.fingerprint:
                        raise ValueError("checkpoint was written with a different configuration")
                    continue
                done[record["id"]] = ItemResult.from_json(record)
        return done

    def start(self, resume: bool) -> dict[str, ItemResult]:
        done = self.load() if resume else {}
        if not done:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", encoding="utf-8") as fh:
                fh.write(json.dumps({"fingerprint": self.fingerprint}) + "\n")
        return done

    def append(self, result: ItemResult) -> None:
        line = json.dumps(result.to_json(), ensure_ascii=False)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()


def evaluate_benchmark(
    items: Sequence[BenchmarkItem],
    client: ChatClient,
    engine: BeqEngine,
    cfg: GenerationConfig | None = None,
    k: int = 16,
    seed: int = 0,
    benchmark_name: str = "benchmark",
    with_maj: bool = True,
    checkpoint_path: str | Path | None = None,
    resume: bool = False,
    workers: int | None = None,
    forbid_proof: bool = False,
) -> EvalReport:
    """Generate ``k`` candidates per item, check each against the ground truth and aggregate.

    A failing item is recorded with its error and scores zero; it never stops
    the run. With ``checkpoint_path`` every finished item is appended to a
    JSONL file, and ``resume=True`` skips the ids already there.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cfg = cfg or GenerationConfig()
    fingerprint = config_fingerprint(
        {
            "benchmark": benchmark_name,
            "items": [i.id for i in items],
            "k": k,
            "seed": seed,
            "maj": with_maj,
            "forbid_proof": forbid_proof,
            "generation": cfg.to_json(),
            "timeout_s": engine.timeout_s,
        }
    )
    ckpt = Checkpoint(checkpoint_path, fingerprint) if checkpoint_path else None
    done = ckpt.start(resume) if ckpt else {}
    todo = [i for i in items if i.id not in done]
    if done:
        logger.info("resuming: %d of %d items already done", len(items) - len(todo), len(items))

    def run(item: BenchmarkItem) -> ItemResult:
        try:
            result = evaluate_item(item, client, engine, cfg, k, seed, with_maj, forbid_proof)
        except Exception as exc:  # noqa: BLE001 - recorded per item
            logger.warning("item %s failed: %s", item.id, exc)
            result = ItemResult(
                item.id, (), (False,) * k, None, False if with_maj else None, None, f"{type(exc).__name__}: {exc}"
            )
        if ckpt:
            ckpt.append(result)
        return result

    pool_size = workers or engine.verifier.worker_count
    if pool_size > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=pool_size) as pool:
            for result in pool.map(run, todo):
                done[result.id] = result
    else:
        for item in todo:
            done[item.id] = run(item)
    per_item = [done[i.id] for i in items]
    return EvalReport.build(benchmark_name, k, per_item, fingerprint, cfg.model_id, with_maj)


def classify_errors(
    report: EvalReport,
    items: Sequence[BenchmarkItem],
    client: ChatClient,
    cfg: GenerationConfig | None = None,
    first_only: bool = True,
) -> EvalReport:
    """Ask the classifier about failed attempts and fill the error histogram.

    Only attempts that parsed into a statement can be classified. Replies
    without a valid trailer, and calls that fail, count as ``unclassified``.
    """
    cfg = cfg or GenerationConfig(temperature=0.0, n_samples=1)
    by_id = {i.id: i for i in items}
    histogram: Counter[str] = Counter()
    per_item = []
    for result in report.per_item:
        item = by_id.get(result.id)
        labels: list[str] = []
        failed = [a for a, ok in zip(result.attempts, result.verdicts) if not ok and a.statement is not None]
        if item is not None:
            for attempt in failed[:1] if first_only else failed:
                assert attempt.statement is not None
                errors = [d for d in attempt.diagnostics if "sorry" not in d]
                prompt = build_error_classifier_prompt(item.informal, attempt.statement, errors)
                try:
                    label = parse_error_class(client.ask(prompt, cfg)).key
                except (UnparseableVerdict, GatewayError) as exc:
                    logger.info("item %s: classifier gave no usable answer (%s)", result.id, exc)
                    label = UNCLASSIFIED
                labels.append(label)
                histogram[label] += 1
        per_item.append(replace(result, error_classes=tuple(labels)))
    return replace(report, per_item=tuple(per_item), error_histogram=dict(histogram))


def _pct(x: float | None) -> str:
    return "n/a" if x is None else f"{x * 100:.1f}"


def emit_report(report: EvalReport, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report.to_json(), ensure_ascii=False, indent=2) + "\n"
    if fmt != "markdown":
        raise ValueError(f"unknown report format {fmt!r}")
    k = report.k
    lines = [
        f"# {report.benchmark_name}",
        "",
        f"config_fingerprint: `{report.config_fingerprint}`",
        "",
        f"| Model | Items | BEq@1 / BEq@{k} | Maj@{k} |",
        "|---|---|---|---|",
        f"| {report.model_id or '-'} | {report.n_items} | "
        f"{_pct(report.beq_at.get(1))} / {_pct(report.beq_at.get(k))} | {_pct(report.maj_at_k)} |",
    ]
    if report.error_histogram:
        lines += ["", "| Error type | Count |", "|---|---|"]
        lines += [f"| {key} | {n} |" for key, n in sorted(report.error_histogram.items())]
    return "\n".join(lines) + "\n"
