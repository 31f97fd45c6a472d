"""Acceptance suite: one or more tests per criterion, summarised at the end of the run."""

import json
import os
import random
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction
from pathlib import Path

import httpx
import pytest

from beqkit.beq import BeqEngine, VerdictMatrix, beq_at_k, majority_select
from beqkit.core import CandidateSet, EquivalencePartition, InformalProblem, extract_formal_statement
from beqkit.cli import main as cli_main
from beqkit.data import (
    EMPTY_THINK,
    NgramIndex,
    TrajectoryInconsistent,
    filter_informal,
    format_sft_stage1,
    format_sft_stage2,
    read_jsonl,
    to_proof_form,
    tokenize,
    write_jsonl,
)
from beqkit.evaluator import EvalReport
from beqkit.reward import RewardService, create_app
from beqkit.verifier import BackendConfig, BackendKind, MockTable, make_verifier, mock_equivalence_oracle
from helpers import connected_components, engine_for, stmt

FIXTURES = Path(__file__).parent / "fixtures"
criterion = pytest.mark.criterion


# ---------------------------------------------------------------- criterion 1


@criterion(1, "partition equals brute-force connected components (50 cases, size <= 8, < 10 s)")
def test_partition_matches_components_suite():
    rng = random.Random(1)
    props = [f"u{i} = v{i}" for i in range(8)]
    start = time.monotonic()
    mismatches = 0
    for case in range(50):
        size = 1 + case % 8
        aliases = {rng.choice(props): rng.choice(props) for _ in range(rng.randint(0, 5))}
        table = MockTable(aliases=aliases)
        engine = engine_for(table)
        cands = [stmt(rng.choice(props), name=f"c{i}") for i in range(size)]
        part = engine.partition_candidates(cands)
        oracle = connected_components(size, lambda i, j: mock_equivalence_oracle(cands[i], cands[j], table))
        mismatches += sorted(map(set, part.classes), key=min) != sorted(oracle, key=min)
        assert engine.beq_calls <= size * len(part.classes)
    assert mismatches == 0
    assert time.monotonic() - start < 10


# ---------------------------------------------------------------- criterion 2


def _direct_beq_at(rows: list[list[bool]], k: int) -> Fraction:
    hits = 0
    for row in rows:
        for j in range(k):
            if row[j]:
                hits += 1
                break
    return Fraction(hits, len(rows))


@criterion(2, "BEq@k reproduces the direct formula on 1,000 random cases and is monotone in k")
def test_beq_at_k_randomized_oracle():
    rng = random.Random(2)
    for _ in range(1000):
        n, cols = rng.randint(1, 20), rng.randint(1, 16)
        p = rng.random()
        rows = [[rng.random() < p for _ in range(cols)] for _ in range(n)]
        m = VerdictMatrix.of(rows)
        values = [beq_at_k(m, k) for k in range(1, cols + 1)]
        assert values == [_direct_beq_at(rows, k) for k in range(1, cols + 1)]
        assert all(a <= b for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------- criterion 3

CRITERION_3 = "majority vote picks a maximal class; Maj@16 > BEq@1 on a 35%-correct suite (95% bootstrap)"


@criterion(3, CRITERION_3)
def test_majority_select_planted_modal_classes():
    rng = random.Random(3)
    for case in range(200):
        n = rng.randint(1, 16)
        labels = [rng.randint(0, rng.randint(0, 5)) for _ in range(n)]
        classes: dict[int, list[int]] = {}
        for i, label in enumerate(labels):
            classes.setdefault(label, []).append(i)
        ordered = sorted(classes.values(), key=lambda c: rng.random())
        part = EquivalencePartition(tuple(tuple(c) for c in ordered))
        chosen = majority_select(part, seed=f"{case}")
        biggest = max(len(c) for c in ordered)
        assert any(chosen in c and len(c) == biggest for c in ordered)


def _synthetic_suite(n_problems: int, k: int, p_mean: float, seed: int):
    """Candidate sets whose per-candidate correctness averages ``p_mean``.

    Per-problem difficulty varies (Beta distributed); wrong candidates fall
    into a handful of distinct wrong classes, and correct candidates come in
    two textual variants that only BEq identifies.
    """
    rng = random.Random(seed)
    a = 0.7
    b = a * (1 - p_mean) / p_mean
    aliases, csets, gts = {}, [], []
    for i in range(n_problems):
        right = [f"a{i} + b{i} = c{i}", f"b{i} + a{i} = c{i}"]
        aliases[right[1]] = right[0]
        wrong_pool = [f"w{i}_{j} = c{i}" for j in range(rng.randint(2, 5))]
        weights = [rng.random() + 0.05 for _ in wrong_pool]
        p = rng.betavariate(a, b)
        outputs = []
        for _ in range(k):
            prop = rng.choice(right) if rng.random() < p else rng.choices(wrong_pool, weights)[0]
            outputs.append(f"theorem my_favorite_theorem : {prop} := by sorry")
        csets.append(CandidateSet.from_outputs(f"s{i}", outputs))
        gts.append(stmt(right[0], name=f"gt{i}"))
    return MockTable(aliases=aliases), csets, gts


@criterion(3, CRITERION_3)
def test_majority_vote_beats_single_sample():
    table, csets, gts = _synthetic_suite(500, 16, 0.35, seed=35)
    engine = BeqEngine(make_verifier(BackendConfig(kind=BackendKind.MOCK), table))
    first = [engine.check_beq(c.candidates[0].parsed, gt).equivalent for c, gt in zip(csets, gts)]
    per_candidate = sum(
        engine.check_beq(cand.parsed, gt).equivalent for c, gt in zip(csets, gts) for cand in c.candidates
    ) / (500 * 16)
    maj = []
    for c, gt in zip(csets, gts):
        sel = engine.majority_vote(c, 16, seed=0)
        maj.append(sel.index is not None and engine.check_beq(c.candidates[sel.index].parsed, gt).equivalent)
    assert engine.maj_at_k(csets, gts, 16, seed=0) == Fraction(sum(maj), 500)

    beq1 = beq_at_k(VerdictMatrix.of([[f] for f in first]), 1)
    gap = float(Fraction(sum(maj), 500) - beq1)
    diffs = [int(m) - int(f) for m, f in zip(maj, first)]
    rng = random.Random(0)
    boots = sorted(sum(rng.choices(diffs, k=len(diffs))) / len(diffs) for _ in range(2000))
    lower = boots[int(0.025 * len(boots))]
    print(f"per-candidate {per_candidate:.3f}  BEq@1 {float(beq1):.3f}  Maj@16 {sum(maj) / 500:.3f}  "
          f"gap {gap:.3f}  95% lower bound {lower:.3f}")
    assert 0.30 <= per_candidate <= 0.40
    assert lower > 0
    assert gap >= 0.05


# ---------------------------------------------------------------- criterion 4


def _naive_contaminated(train: str, eval_text: str, n: int) -> bool:
    t, e = tokenize(train), tokenize(eval_text)
    windows = {tuple(e[i:i + n]) for i in range(len(e) - n + 1)}
    return any(tuple(t[i:i + n]) in windows for i in range(len(t) - n + 1))


@criterion(4, "decontamination agrees with the naive window oracle (200 cases incl. 12/13 boundary)")
def test_decontamination_against_naive_oracle():
    rng = random.Random(4)
    vocab = ["alpha", "beta", "gamma", "delta", "x1", "Y2"]
    words = [f"w{i}" for i in range(20)]
    cases = [
        (" ".join(words[:12]) + " filler", " ".join(words[:13])),
        (" ".join(words[:13]) + " filler", " ".join(words[:13])),
    ]
    while len(cases) < 200:
        eval_text = " ".join(rng.choices(vocab, k=rng.randint(5, 30)))
        toks = eval_text.split()
        span = rng.randint(8, 16)
        start = rng.randint(0, max(0, len(toks) - span))
        filler = lambda: " ".join(rng.choices(vocab + ["zeta"], k=rng.randint(0, 6)))  # noqa: E731
        train = f"{filler()} {' '.join(toks[start:start + span])} {filler()}".upper()
        cases.append((train, eval_text))
    disagreements = 0
    hits = 0
    for train, eval_text in cases:
        ours = NgramIndex([eval_text], 13).find(train) is not None
        naive = _naive_contaminated(train, eval_text, 13)
        disagreements += ours != naive
        hits += naive
    assert disagreements == 0
    assert _naive_contaminated(*cases[1], 13) and not _naive_contaminated(*cases[0], 13)
    assert 0 < hits < len(cases)


# ---------------------------------------------------------------- criterion 5


@criterion(5, "filter rules pass the 20-case fixture table")
def test_filter_fixture_table():
    cases = json.loads((FIXTURES / "filter_cases.json").read_text(encoding="utf-8"))
    assert len(cases) == 20
    passed = 0
    for case in cases:
        p = InformalProblem.from_json(case)
        plain = filter_informal(p).rule_fired.value == case["expected"]
        expected_flagged = case.get("expected_with_subquestions", case["expected"])
        flagged = filter_informal(p, detect_subquestions=True).rule_fired.value == expected_flagged
        rewrite = True
        if case["expected"] == "Kept" and not p.is_proof:
            rewrite = to_proof_form(p).text == f"{p.text} Show that it is {p.answer}."
        passed += plain and flagged and rewrite
    assert passed == 20
    rules = {c["expected"] for c in cases} | {c.get("expected_with_subquestions") for c in cases}
    assert {"ExcludedType", "MultiSubQuestion", "NonNumericAnswer", "Incomplete", "Kept"} <= rules


# ---------------------------------------------------------------- criterion 6


@criterion(6, "direction probes match 10 golden files byte for byte")
def test_probe_goldens_byte_stable():
    from test_beq import PROBE_CASES, PROBES, render_probe_case

    assert len(PROBE_CASES) == 10
    kinds = set()
    for case in PROBE_CASES:
        name, text = render_probe_case(case)
        assert text.encode("utf-8") == (PROBES / name).read_bytes()
        assert render_probe_case(case) == (name, text)
        kinds.add(name.rsplit(".", 1)[1])
    assert kinds == {"lean", "err"}
    merged = [c for c in PROBE_CASES if "import Mathlib" in c["target"] and "import" not in c["assumed"]]
    assert merged


# ---------------------------------------------------------------- criterion 7


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class _Server:
    def __init__(self, service: RewardService):
        import uvicorn

        self.port = _free_port()
        config = uvicorn.Config(create_app(service), host="127.0.0.1", port=self.port, log_level="warning")
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def __enter__(self) -> str:
        self.thread.start()
        deadline = time.monotonic() + 10
        while not self.server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("reward server did not start")
            time.sleep(0.02)
        return f"http://127.0.0.1:{self.port}"

    def __exit__(self, *exc) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=10)


def _reward_script(n: int = 1000, dup: int = 32, seed: int = 7) -> list[dict]:
    rng = random.Random(seed)
    header = "import Mathlib"
    unique = []
    for i in range(-(-n // dup)):
        gt = f"theorem gt{i} : a{i} + b{i} = c{i} := by sorry"
        kind = i % 4
        prop = [f"b{i} + a{i} = c{i}", f"a{i} * b{i} = c{i}", f"(a{i} = c{i}", None][kind]
        generated = "no statement here" if prop is None else (
            f"<think>try</think>```lean4\n{header}\n\ntheorem my_favorite_theorem : {prop} := by sorry\n```"
        )
        unique.append({"generated": generated, "ground_truth": gt, "ground_truth_header": header, "timeout_s": 5})
    script = [unique[i // dup] for i in range(n)]
    rng.shuffle(script)
    return script


def _run_script(script: list[dict]) -> tuple[list[dict], list[float], dict]:
    table = MockTable(aliases={f"b{i} + a{i} = c{i}": f"a{i} + b{i} = c{i}" for i in range(40)}, delay_s=0.002)
    service = RewardService(engine_for(table, workers=4), default_timeout_s=5)
    with _Server(service) as base, httpx.Client(base_url=base, timeout=30) as client:
        def send(body: dict) -> tuple[dict, float]:
            start = time.monotonic()
            r = client.post("/reward", json=body)
            r.raise_for_status()
            return r.json(), time.monotonic() - start

        with ThreadPoolExecutor(max_workers=16) as pool:
            results = list(pool.map(send, script))
        stats = client.get("/stats").json()
    return [r for r, _ in results], [t for _, t in results], stats


@criterion(7, "reward service: 1,000 requests, 32-way duplication, hit rate >= 90%, deadline, replay")
def test_reward_service_under_load():
    script = _reward_script()
    responses, latencies, stats = _run_script(script)
    assert len(responses) == 1000
    assert {r["reward"] for r in responses} <= {0, 1}
    assert {r["reason"] for r in responses} == {"Equivalent", "NotEquivalent", "SyntaxFailure", "ParseFailure"}
    parse_requests = sum(s["generated"] == "no statement here" for s in script)
    lookups = stats["cache_hits"] + stats["cache_misses"]
    assert lookups == 1000 - parse_requests
    print(f"hit rate {stats['cache_hit_rate']:.3f}  p95 {stats['latency_ms_p95']} ms  max rtt {max(latencies):.3f} s")
    assert stats["cache_hit_rate"] >= 0.90
    assert max(latencies) <= 5 + 2
    replay, _, _ = _run_script(script)
    strip = lambda rs: [(r["reward"], r["reason"]) for r in rs]  # noqa: E731
    assert strip(replay) == strip(responses)


# ---------------------------------------------------------------- criterion 8


def _corpus() -> tuple[list[dict], dict[str, str]]:
    """50 problems: 40 pass the filter; each has a hidden 'right' proposition."""
    problems, right = [], {}
    for i in range(50):
        pid = f"q{i:02d}"
        if i % 5 == 4:
            kind = [("Geometry", "7"), ("Algebra", "x = 3")][i % 2]
            problems.append({"id": pid, "text": f"Problem {pid}: compute something.", "problem_type": kind[0],
                             "answer": kind[1], "is_proof": False})
            continue
        if i % 2:
            problems.append({"id": pid, "text": f"Problem {pid}: prove the identity for item {i}.",
                             "problem_type": "Algebra", "is_proof": True})
        else:
            problems.append({"id": pid, "text": f"Problem {pid}: compute the value for item {i}.",
                             "problem_type": "Number Theory", "answer": str(i), "is_proof": False})
        right[pid] = f"a{i} + b{i} = c{i}"
    return problems, right


def _lean(prop: str) -> str:
    return f"```lean4\nimport Mathlib\n\ntheorem my_favorite_theorem : {prop} := by sorry\n```"


@criterion(8, "filter -> generate -> select -> evaluate on 50 problems in < 60 s, self-consistent report")
def test_end_to_end_mock_pipeline(tmp_path):
    start = time.monotonic()
    problems, right = _corpus()
    table = tmp_path / "table.json"
    aliases = {f"b{i} + a{i} = c{i}": f"a{i} + b{i} = c{i}" for i in range(50)}
    table.write_text(json.dumps({"aliases": aliases}), encoding="utf-8")
    raw = tmp_path / "raw.jsonl"
    write_jsonl(raw, problems)

    filtered = tmp_path / "filtered.jsonl"
    assert cli_main(["filter", "--in", str(raw), "--out", str(filtered), "--log", str(tmp_path / "filter.log")]) == 0
    kept = read_jsonl(filtered)
    assert len(kept) == 40

    rng = random.Random(8)
    teacher = []
    for r in kept:
        i = int(r["id"][1:])
        pool = [_lean(f"a{i} + b{i} = c{i}"), _lean(f"b{i} + a{i} = c{i}"), _lean(f"a{i} = c{i}"), "garbled"]
        teacher.append({"id": r["id"], "outputs": rng.choices(pool, weights=[4, 4, 3, 1], k=16)})
    teacher_path = tmp_path / "teacher.jsonl"
    write_jsonl(teacher_path, teacher)
    cands = tmp_path / "cands.jsonl"
    assert cli_main(["generate", "--in", str(filtered), "--out", str(cands), "--mock-responses", str(teacher_path)]) == 0

    selected = tmp_path / "selected.jsonl"
    backend = ["--backend", "mock", "--mock-table", str(table), "--workers", "2"]
    assert cli_main(["select", *backend, "--in", str(cands), "--out", str(selected), "--seed", "1"]) == 0
    chosen = read_jsonl(selected)
    assert all(r["kept"] for r in chosen)

    texts = {r["id"]: r["text"] for r in kept}
    bench = tmp_path / "bench.jsonl"
    write_jsonl(bench, [
        {"id": r["problem_id"], "informal": texts[r["problem_id"]],
         "ground_truth_header": r["statement"]["header"], "ground_truth": r["statement"]["body"]}
        for r in chosen
    ])
    student = []
    for r in kept:
        i = int(r["id"][1:])
        pool = [_lean(f"b{i} + a{i} = c{i}"), _lean(f"a{i} = c{i}"), _lean(f"d{i} = c{i}"), "garbled"]
        student.append({"id": r["id"], "outputs": rng.choices(pool, weights=[3, 4, 2, 1], k=8)})
    student_path = tmp_path / "student.jsonl"
    write_jsonl(student_path, student)
    report_path = tmp_path / "report.json"
    assert cli_main(["evaluate", *backend, "--bench", str(bench), "--out", str(report_path),
                     "--mock-responses", str(student_path), "--k", "8"]) == 0
    elapsed = time.monotonic() - start

    data = json.loads(report_path.read_text(encoding="utf-8"))
    report = EvalReport.from_json(data)  # validates aggregates against per-item verdicts
    rows = [list(item.verdicts) for item in report.per_item]
    assert report.n_items == 40
    assert report.beq_at[1] == float(_direct_beq_at(rows, 1))
    assert report.beq_at[8] == float(_direct_beq_at(rows, 8))
    assert report.maj_at_k == sum(bool(i.maj_correct) for i in report.per_item) / 40
    assert 0 < report.beq_at[1] <= report.beq_at[8] <= 1
    print(f"pipeline {elapsed:.1f} s  BEq@1 {report.beq_at[1]:.3f}  BEq@8 {report.beq_at[8]:.3f}  Maj@8 {report.maj_at_k:.3f}")
    assert elapsed < 60


# ---------------------------------------------------------------- criterion 9

LEAN_PROJECT = os.environ.get("BEQKIT_LEAN_PROJECT")


@pytest.mark.lean
@pytest.mark.skipif(not LEAN_PROJECT, reason="set BEQKIT_LEAN_PROJECT to a Lean 4 + Mathlib project with the REPL")
@criterion(9, "real Lean checker: identical pairs equivalent, disjoint pairs not, hypothesis-use guard")
def test_real_lean_checker():
    config = BackendConfig(
        kind=BackendKind.LEAN_REPL,
        lean_project=LEAN_PROJECT,
        lean_command=os.environ.get("BEQKIT_LEAN_CMD", "lake exe repl"),
        default_timeout_s=int(os.environ.get("BEQKIT_LEAN_TIMEOUT", "120")),
    )
    engine = BeqEngine(make_verifier(config))
    h = "import Mathlib"
    same = [
        "(x : ℝ) (h : 0 < x) : 0 < x ^ 2",
        "(n : ℕ) (h : Odd n) : Odd (n ^ 2)",
        "(a b : ℤ) : (a + b) ^ 2 = a ^ 2 + 2 * a * b + b ^ 2",
        ": (2 : ℕ) ^ 10 = 1024",
        "(s : Finset ℕ) : s.card ≤ s.card + 1",
    ]
    disjoint = [
        (": (2 : ℕ) + 2 = 5", ": (3 : ℕ) * 3 = 10"),
        ("(x : ℝ) : x ^ 2 ≥ 0", "(n : ℕ) : n < n + 2"),
        (": Nat.Prime 7", ": (10 : ℤ) ∣ 35"),
        ("(a : ℝ) (h : a > 1) : a ^ 2 > a", "(p : ℕ) (hp : p.Prime) : p ≥ 2"),
        (": (1 : ℚ) / 3 > 0.3", ": ∃ n : ℕ, n * n = 50"),
    ]
    try:
        for sig in same:
            y1 = extract_formal_statement(f"{h}\n\ntheorem a {sig} := by sorry")
            y2 = extract_formal_statement(f"{h}\n\ntheorem b {sig} := by sorry")
            assert engine.check_beq(y1, y2).equivalent, sig
        for s1, s2 in disjoint:
            y1 = extract_formal_statement(f"{h}\n\ntheorem a {s1} := by sorry")
            y2 = extract_formal_statement(f"{h}\n\ntheorem b {s2} := by sorry")
            assert not engine.check_beq(y1, y2).equivalent, (s1, s2)
        unrelated = extract_formal_statement(f"{h}\n\ntheorem a (x : ℝ) (h : x > 5) : x ^ 3 > 100 := by sorry")
        trivial = extract_formal_statement(f"{h}\n\ntheorem b : 1 = 1 := by sorry")
        assert not engine.check_direction(unrelated, trivial)[0]
    finally:
        engine.close()
        engine.verifier.close()


# --------------------------------------------------------------- criterion 10


@criterion(10, "stage-1 SFT records start with an empty think span and round-trip; mutated trajectory rejected")
def test_sft_formatting():
    rng = random.Random(10)
    headers = ["", "import Mathlib", "import Mathlib\nopen Real", "import Mathlib\n\ndef f (n : ℕ) : ℕ := n + 1"]
    props = ["x + y = y + x", "0 < x ^ 2 + 1", "f x ≠ 0", "x ∣ x * y"]
    for i in range(100):
        header = rng.choice(headers)
        body = f"theorem thm_{i} (x y : ℕ) : {rng.choice(props)} := by sorry"
        y = extract_formal_statement(f"{header}\n\n{body}" if header else body)
        x = InformalProblem(id=f"x{i}", text=f"Problem {i}.")
        record = format_sft_stage1(x, y, forbid_proof=bool(i % 2))
        assert record.response.startswith(EMPTY_THINK)
        assert extract_formal_statement(record.response) == y

    trajectory = (FIXTURES / "trajectory_zmod3.txt").read_text(encoding="utf-8")
    y = extract_formal_statement("import Mathlib\n\ntheorem my_favorite_theorem : ∀ x : ZMod 3, x ^ 2 ≠ 2 := by sorry")
    x = InformalProblem(id="z3", text="Show that no square modulo 3 equals 2.")
    assert format_sft_stage2(x, trajectory, y).response.startswith("<think>")
    mutated = trajectory.replace("x ^ 2 ≠ 2 := by sorry\n```\n", "x ^ 2 ≠ 1 := by sorry\n```\n")
    with pytest.raises(TrajectoryInconsistent):
        format_sft_stage2(x, mutated, y)
