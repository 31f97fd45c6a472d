"""``beqkit`` command line: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from beqkit.beq import BeqEngine, EquivalenceCache, majority_select, problem_seed
from beqkit.core import (
    CandidateSet,
    FormalStatement,
    InformalProblem,
    ParseError,
    canonicalize,
    extract_formal_statement,
    strip_think,
)
from beqkit.data import (
    PROOF_FORM_PHRASE,
    StageLog,
    TrajectoryInconsistent,
    dedup_by_name,
    format_sft_stage1,
    format_sft_stage2,
    ngram_decontaminate,
    prepare_problems,
    read_jsonl,
    trajectory_statement,
    write_jsonl,
)
from beqkit.gateway import (
    AuditLog,
    ChatClient,
    GatewayError,
    GenerationConfig,
    HttpChatBackend,
    MockChatBackend,
    TokenBucket,
    UnparseableVerdict,
    build_reasoning_synthesis_prompt,
    build_validity_judge_prompt,
    generate_candidates,
    parse_judge_verdict,
)
from beqkit.verifier import BackendConfig, BackendError, MockTable, make_verifier

logger = logging.getLogger("beqkit")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- factories


def build_engine(args: argparse.Namespace) -> BeqEngine:
    table = MockTable.load(args.mock_table) if args.mock_table else None
    config = BackendConfig.from_env(
        args.backend,
        endpoint=args.endpoint,
        worker_count=args.workers,
        default_timeout_s=args.timeout,
        lean_command=args.lean_cmd,
        lean_project=args.lean_project,
    )
    verifier = make_verifier(config, table)
    return BeqEngine(verifier, EquivalenceCache(args.cache_path))


class MockResponses:
    """Prompt-matched canned completions loaded from JSONL.

    Records are ``{"match": substring, "outputs": [...]}``; a record without
    ``match`` is the fallback. Records keyed by ``id`` are bound to a problem
    text with :meth:`bind`.
    """

    def __init__(self, records: list[dict]):
        self.records = records

    def bind(self, texts_by_id: dict[str, str]) -> None:
        for r in self.records:
            if "match" not in r and "id" in r and str(r["id"]) in texts_by_id:
                r["match"] = texts_by_id[str(r["id"])]

    def __call__(self, prompt: str, n: int, call_index: int) -> list[str]:
        fallback = None
        for r in self.records:
            match = r.get("match")
            if match is None and "id" not in r:
                fallback = fallback or r
            elif match is not None and match in prompt:
                return list(r["outputs"])
        if fallback is None:
            raise GatewayError("no canned response matches the prompt")
        return list(fallback["outputs"])


def build_client(args: argparse.Namespace, texts_by_id: dict[str, str] | None = None) -> ChatClient:
    if args.mock_responses:
        responses = MockResponses(read_jsonl(args.mock_responses))
        responses.bind(texts_by_id or {})
        backend: Any = MockChatBackend(responses)
    else:
        backend = HttpChatBackend(args.llm_endpoint)
    limiter = TokenBucket(args.llm_rate) if args.llm_rate else None
    return ChatClient(backend, max_retries=args.max_retries, limiter=limiter, audit=AuditLog(args.audit_log))


def generation_config(args: argparse.Namespace, n: int | None = None) -> GenerationConfig:
    return GenerationConfig(
        temperature=args.temperature,
        max_context_tokens=args.max_tokens,
        n_samples=n or args.n_samples,
        model_id=args.model,
    )


def _problems(path: str) -> list[InformalProblem]:
    return [InformalProblem.from_json(r) for r in read_jsonl(path)]


# ---------------------------------------------------------------- commands


def cmd_filter(args: argparse.Namespace) -> int:
    problems = _problems(args.input)
    with _open_log(args.log) as sink:
        log = StageLog(sink)
        kept, dropped = prepare_problems(problems, log, args.detect_subquestions, args.phrase)
    write_jsonl(args.out, (p.to_json() for p in kept))
    logger.info("filter: %d in, %d kept, %d dropped", len(problems), len(kept), len(dropped))
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    problems = _problems(args.input)
    hints = {str(r["id"]): r.get("header_hint") for r in read_jsonl(args.input)}
    client = build_client(args, {p.id: p.text for p in problems})
    cfg = generation_config(args)
    done: set[str] = set()
    out = Path(args.out)
    if args.resume and out.exists():
        done = {r["problem_id"] for r in read_jsonl(out)}
    mode = "a" if done else "w"
    with open(out, mode, encoding="utf-8") as fh:
        for p in problems:
            if p.id in done:
                continue
            cset = generate_candidates(p, cfg, client, hints.get(p.id), args.forbid_proof, args.coerce_sorry)
            fh.write(json.dumps(cset.to_json(), ensure_ascii=False) + "\n")
            fh.flush()
    return EXIT_OK


def cmd_select(args: argparse.Namespace) -> int:
    if args.judge and not args.problems:
        raise UsageError("--judge needs --problems to show the judge the informal text")
    csets = [CandidateSet.from_json(r) for r in read_jsonl(args.input)]
    texts = {p.id: p.text for p in _problems(args.problems)} if args.problems else {}
    client = build_client(args) if args.judge else None
    engine = build_engine(args)
    records = []
    try:
        for cset in csets:
            cands = [c.parsed for c in cset.candidates[: args.k]]
            if args.skip_syntax:
                ok = [c is not None for c in cands]
            else:
                ok = [c is not None and engine.syntax_check(c).passed for c in cands]
            if args.skip_vote:
                partition = None
                index = next((i for i, flag in enumerate(ok) if flag), None)
            else:
                partition = engine.partition_candidates(cands, ok)
                index = majority_select(partition, cands, problem_seed(args.seed, cset.problem_id))
            chosen = cands[index] if index is not None else None
            judge = None
            if client is not None and chosen is not None:
                reply = client.ask(build_validity_judge_prompt(texts[cset.problem_id], chosen), generation_config(args, 1))
                try:
                    judge = str(parse_judge_verdict(reply))
                except UnparseableVerdict:
                    judge = "unparseable"
            records.append(
                {
                    "problem_id": cset.problem_id,
                    "selected_index": index,
                    "statement": chosen.to_json() if chosen else None,
                    "partition": partition.to_json() if partition else None,
                    "syntax_ok": ok,
                    "judge": judge,
                    "kept": chosen is not None and judge in (None, "keep"),
                }
            )
    finally:
        engine.close()
        engine.verifier.close()
    write_jsonl(args.out, records)
    return EXIT_OK


def cmd_decontaminate(args: argparse.Namespace) -> int:
    train, eval_set = _problems(args.train), _problems(args.eval)
    with _open_log(args.log) as sink:
        log = StageLog(sink)
        kept, dropped = ngram_decontaminate(train, eval_set, args.n, log)
        if not args.skip_names:
            kept, by_name = dedup_by_name(kept, eval_set, log=log)
            dropped += by_name
    write_jsonl(args.out, (p.to_json() for p in kept))
    if args.dropped:
        write_jsonl(args.dropped, (p.to_json() for p in dropped))
    logger.info("decontaminate: %d in, %d kept, %d dropped", len(train), len(kept), len(dropped))
    return EXIT_OK


def _pair(record: dict) -> tuple[InformalProblem, FormalStatement]:
    problem = record.get("problem") or record.get("informal")
    if isinstance(problem, str):
        x = InformalProblem(id=str(record.get("id", "item")), text=problem)
    else:
        x = InformalProblem.from_json(problem)
    return x, FormalStatement.from_json(record["statement"])


def cmd_format_sft(args: argparse.Namespace) -> int:
    out, rejected = [], 0
    with _open_log(args.log) as sink:
        log = StageLog(sink)
        for record in read_jsonl(args.input):
            x, y = _pair(record)
            try:
                if args.stage == 1:
                    sft = format_sft_stage1(x, y, forbid_proof=args.forbid_proof)
                else:
                    sft = format_sft_stage2(x, record.get("trajectory", ""), y, forbid_proof=args.forbid_proof)
            except TrajectoryInconsistent as exc:
                rejected += 1
                log.record(x.id, "format-sft", "drop", f"TrajectoryInconsistent: {exc}")
                continue
            log.record(x.id, "format-sft", "keep", "Kept")
            out.append(sft.to_json())
    write_jsonl(args.out, out)
    if rejected and args.strict:
        logger.error("%d records rejected", rejected)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_synthesize(args: argparse.Namespace) -> int:
    client = build_client(args)
    cfg = generation_config(args, 1)
    out = []
    with _open_log(args.log) as sink:
        log = StageLog(sink)
        for record in read_jsonl(args.input):
            x, y = _pair(record)
            reply = strip_think(client.ask(build_reasoning_synthesis_prompt(x, y), cfg)).strip()
            try:
                final = trajectory_statement(reply)
                if canonicalize(final.full_text) != canonicalize(y.full_text):
                    raise TrajectoryInconsistent("final code differs from the statement")
            except TrajectoryInconsistent as exc:
                log.record(x.id, "synthesize-reasoning", "drop", f"TrajectoryInconsistent: {exc}")
                continue
            log.record(x.id, "synthesize-reasoning", "keep", "Kept")
            out.append({**record, "trajectory": reply})
    write_jsonl(args.out, out)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    from beqkit.evaluator import emit_report, evaluate_benchmark, load_benchmark

    engine = build_engine(args)
    try:
        items = load_benchmark(read_jsonl(args.bench), None if args.no_gt_check else engine)
        client = build_client(args, {i.id: i.informal.text for i in items})
        report = evaluate_benchmark(
            items,
            client,
            engine,
            generation_config(args),
            k=args.k,
            seed=args.seed,
            benchmark_name=args.name or Path(args.bench).stem,
            with_maj=not args.no_maj,
            checkpoint_path=args.checkpoint or f"{args.out}.checkpoint.jsonl",
            resume=args.resume,
            forbid_proof=args.forbid_proof,
        )
    finally:
        engine.close()
        engine.verifier.close()
    Path(args.out).write_text(emit_report(report, "json"), encoding="utf-8")
    if args.markdown:
        Path(args.markdown).write_text(emit_report(report, "markdown"), encoding="utf-8")
    print(emit_report(report, "markdown"), end="")
    return EXIT_OK


def cmd_classify_errors(args: argparse.Namespace) -> int:
    from beqkit.evaluator import EvalReport, classify_errors, emit_report, load_benchmark

    report = EvalReport.from_json(json.loads(Path(args.report).read_text(encoding="utf-8")))
    items = load_benchmark(read_jsonl(args.bench))
    client = build_client(args)
    report = classify_errors(report, items, client, generation_config(args, 1), first_only=not args.all_attempts)
    Path(args.out).write_text(emit_report(report, "json"), encoding="utf-8")
    return EXIT_OK


def cmd_serve_reward(args: argparse.Namespace) -> int:
    from beqkit.reward import RewardService, serve

    engine = build_engine(args)
    service = RewardService(engine, default_timeout_s=args.timeout)
    try:
        serve(service, args.host, args.port)
    finally:
        engine.close()
        engine.verifier.close()
    return EXIT_OK


def cmd_beq(args: argparse.Namespace) -> int:
    y1 = extract_formal_statement(Path(args.y1).read_text(encoding="utf-8"))
    y2 = extract_formal_statement(Path(args.y2).read_text(encoding="utf-8"))
    engine = build_engine(args)
    try:
        outcome = engine.check_beq(y1, y2)
    finally:
        engine.close()
        engine.verifier.close()
    if args.json:
        print(json.dumps(outcome.to_json(), ensure_ascii=False))
    else:
        print("equivalent" if outcome.equivalent else "not equivalent")
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _NullSink:
    def __enter__(self):
        return None

    def __exit__(self, *exc) -> None:
        pass


def _open_log(path: str | None):
    return open(path, "w", encoding="utf-8") if path else _NullSink()


def _backend_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("checker backend")
    g.add_argument("--backend", choices=["auto", "mock", "lean", "remote"], default="auto",
                   help="auto: remote when BEQKIT_LEAN_ENDPOINT is set, else a local REPL")
    g.add_argument("--mock-table", help="JSON normalization table for the mock backend")
    g.add_argument("--endpoint", help="remote checker URL")
    g.add_argument("--lean-cmd", default="lake exe repl", help="command that starts the Lean REPL")
    g.add_argument("--lean-project", help="working directory of the REPL (a Mathlib project)")
    g.add_argument("--workers", type=int, default=1, help="concurrent checker instances")
    g.add_argument("--timeout", type=int, default=60, help="per-check timeout in seconds")
    g.add_argument("--cache-path", help="SQLite file persisting BEq results")
    return p


def _llm_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("LLM provider")
    g.add_argument("--mock-responses", help="JSONL of canned completions instead of a live provider")
    g.add_argument("--llm-endpoint", help="chat-completion URL (default: BEQKIT_LLM_ENDPOINT)")
    g.add_argument("--model", default="default")
    g.add_argument("--temperature", type=float, default=0.6)
    g.add_argument("--max-tokens", type=int, default=16384)
    g.add_argument("--n-samples", type=int, default=16)
    g.add_argument("--llm-rate", type=float, help="requests per second")
    g.add_argument("--max-retries", type=int, default=4)
    g.add_argument("--audit-log", help="append every exchange to this JSONL file")
    return p


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="beqkit", description=__doc__)
    parser.add_argument("--config", help="TOML file of flag defaults; [subcommand] tables apply per command")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    backend, llm = _backend_flags(), _llm_flags()
    subs: dict[str, argparse.ArgumentParser] = {}

    def add(name: str, func, help_: str, parents=()) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_, parents=list(parents))
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("filter", cmd_filter, "apply the informal-problem selection rules")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="stage log JSONL")
    p.add_argument("--detect-subquestions", action="store_true")
    p.add_argument("--phrase", default=PROOF_FORM_PHRASE, help="lead-in used for proof-form rewriting")

    p = add("generate", cmd_generate, "sample candidate statements per problem", [llm])
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--forbid-proof", action="store_true")
    p.add_argument("--coerce-sorry", action="store_true")
    p.add_argument("--resume", action="store_true")

    p = add("select", cmd_select, "syntax check, majority vote and optional LLM judge", [backend, llm])
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--problems", help="informal problems JSONL (needed by --judge)")
    p.add_argument("--judge", action="store_true", help="ask an LLM to assess the selected statement")
    p.add_argument("--skip-syntax", action="store_true")
    p.add_argument("--skip-vote", action="store_true")

    p = add("decontaminate", cmd_decontaminate, "drop training problems overlapping an eval set")
    p.add_argument("--train", required=True)
    p.add_argument("--eval", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dropped")
    p.add_argument("--n", type=int, default=13)
    p.add_argument("--skip-names", action="store_true")
    p.add_argument("--log")

    p = add("format-sft", cmd_format_sft, "emit SFT records")
    p.add_argument("--stage", type=int, choices=[1, 2], required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--forbid-proof", action="store_true")
    p.add_argument("--strict", action="store_true", help="exit 1 if any record is rejected")
    p.add_argument("--log")

    p = add("synthesize-reasoning", cmd_synthesize, "request reasoning trajectories for statement pairs", [llm])
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")

    p = add("evaluate", cmd_evaluate, "BEq@k / Maj@k benchmark run", [backend, llm])
    p.add_argument("--bench", required=True)
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--markdown", help="also write a markdown report here")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--checkpoint", help="checkpoint JSONL (default: <out>.checkpoint.jsonl)")
    p.add_argument("--no-maj", action="store_true")
    p.add_argument("--no-gt-check", action="store_true", help="skip the ground-truth checker pass at load")
    p.add_argument("--forbid-proof", action="store_true")

    p = add("classify-errors", cmd_classify_errors, "LLM error analysis of a report", [llm])
    p.add_argument("--report", required=True)
    p.add_argument("--bench", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--all-attempts", action="store_true")

    p = add("serve-reward", cmd_serve_reward, "run the reward HTTP service", [backend])
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int)

    p = add("beq", cmd_beq, "check one pair of statements", [backend])
    p.add_argument("--y1", required=True)
    p.add_argument("--y2", required=True)
    p.add_argument("--json", action="store_true")
    return parser, subs


def _load_config(path: str) -> dict[str, Any]:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _apply_config(subs: dict[str, argparse.ArgumentParser], config: dict[str, Any]) -> None:
    common = {k.replace("-", "_"): v for k, v in config.items() if not isinstance(v, dict)}
    for name, p in subs.items():
        dests = {a.dest for a in p._actions}
        section = {k.replace("-", "_"): v for k, v in config.get(name, {}).items()}
        values = {k: v for k, v in {**common, **section}.items() if k in dests}
        p.set_defaults(**values)


def config_fingerprint(args: argparse.Namespace) -> str:
    settings = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "log_level")}
    blob = json.dumps(settings, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        if known.config:
            _apply_config(subs, _load_config(known.config))
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (OSError, ValueError) as exc:
        print(f"beqkit: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logger.info("config_fingerprint=%s", config_fingerprint(args))
    try:
        return args.func(args)
    except UsageError as exc:
        subs[args.command].print_usage(sys.stderr)
        print(f"beqkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, ParseError, BackendError, GatewayError) as exc:
        print(f"beqkit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
