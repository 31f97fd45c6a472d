"""Binary BEq reward for RL rollouts, as a library object and an HTTP service."""

from __future__ import annotations

import enum
import logging
import os
import threading
import time
from collections import deque
from collections.abc import Sequence
from concurrent.futures import Future, ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from contextlib import asynccontextmanager
from dataclasses import dataclass

from pydantic import BaseModel, Field

from beqkit.beq import BeqEngine
from beqkit.core import FormalStatement, ParseError, canonicalize, extract_formal_statement
from beqkit.verifier import DEFAULT_TIMEOUT_S, BackendError

logger = logging.getLogger(__name__)

PORT_ENV = "BEQKIT_REWARD_PORT"
DEFAULT_PORT = 8390


class RewardReason(str, enum.Enum):
    EQUIVALENT = "Equivalent"
    NOT_EQUIVALENT = "NotEquivalent"
    PARSE_FAILURE = "ParseFailure"
    SYNTAX_FAILURE = "SyntaxFailure"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class RewardRequest:
    generated_raw: str
    ground_truth: FormalStatement
    timeout_s: int | None = None


@dataclass(frozen=True)
class RewardResponse:
    reward: int
    reason: RewardReason
    elapsed_ms: int

    def __post_init__(self) -> None:
        if self.reward != int(self.reason is RewardReason.EQUIVALENT):
            raise ValueError("reward is 1 exactly when the reason is Equivalent")

    def to_json(self) -> dict:
        return {"reward": self.reward, "reason": self.reason.value, "elapsed_ms": self.elapsed_ms}


_Key = tuple[str, str]


def _percentile(values: Sequence[int], q: float) -> int:
    if not values:
        return 0
    ordered = sorted(values)
    return ordered[min(len(ordered) - 1, int(q * len(ordered)))]


class RewardService:
    """Computes rewards with result caching and single-flight deduplication.

    Concurrent requests for the same (rollout, ground truth) pair share one
    computation. Every request is answered within its timeout plus ``grace_s``;
    backend failures become a zero reward with reason ``Timeout`` and flip
    the service into degraded health until a check succeeds again.
    """

    def __init__(self, engine: BeqEngine, default_timeout_s: int = DEFAULT_TIMEOUT_S, grace_s: float = 2.0):
        self.engine = engine
        self.default_timeout_s = default_timeout_s
        self.grace_s = grace_s
        self.degraded = False
        self._results: dict[_Key, RewardReason] = {}
        self._inflight: dict[_Key, Future] = {}
        self._gt_valid: dict[str, bool] = {}
        self._lock = threading.Lock()
        workers = max(4, 4 * engine.verifier.worker_count)
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="reward")
        self._fanout = ThreadPoolExecutor(max_workers=16, thread_name_prefix="reward-batch")
        self.hits = 0
        self.misses = 0
        self.computations = 0
        self.requests = 0
        self.in_flight = 0
        self._latencies: deque[int] = deque(maxlen=10_000)

    def _ground_truth_ok(self, gt: FormalStatement) -> bool:
        key = canonicalize(gt.full_text)
        with self._lock:
            known = self._gt_valid.get(key)
        if known is None:
            verdict = self.engine.syntax_check(gt)
            if verdict.timed_out:
                raise TimeoutError("ground truth check timed out")
            known = verdict.passed
            with self._lock:
                self._gt_valid[key] = known
        return known

    def _evaluate(self, gen: FormalStatement, gt: FormalStatement) -> RewardReason:
        with self._lock:
            self.computations += 1
        try:
            if not self._ground_truth_ok(gt):
                logger.warning("ground truth %s fails the checker", gt.theorem_name)
                return RewardReason.SYNTAX_FAILURE
            syntax = self.engine.syntax_check(gen)
            if syntax.timed_out:
                return RewardReason.TIMEOUT
            if not syntax.passed:
                reason = RewardReason.SYNTAX_FAILURE
            else:
                outcome = self.engine.check_beq(gen, gt)
                if outcome.timed_out and not outcome.equivalent:
                    return RewardReason.TIMEOUT
                reason = RewardReason.EQUIVALENT if outcome.equivalent else RewardReason.NOT_EQUIVALENT
        except (BackendError, TimeoutError) as exc:
            logger.warning("reward computation failed: %s", exc)
            self.degraded = True
            return RewardReason.TIMEOUT
        self.degraded = False
        return reason

    def _settle(self, key: _Key, fut: Future) -> None:
        with self._lock:
            self._inflight.pop(key, None)
            if fut.exception() is None and fut.result() is not RewardReason.TIMEOUT:
                self._results[key] = fut.result()

    def _respond(self, start: float, reason: RewardReason) -> RewardResponse:
        elapsed = int((time.monotonic() - start) * 1000)
        with self._lock:
            self._latencies.append(elapsed)
        return RewardResponse(int(reason is RewardReason.EQUIVALENT), reason, elapsed)

    def compute_reward(self, req: RewardRequest) -> RewardResponse:
        start = time.monotonic()
        timeout = req.timeout_s or self.default_timeout_s
        with self._lock:
            self.requests += 1
            self.in_flight += 1
        try:
            try:
                gen = extract_formal_statement(req.generated_raw)
            except ParseError:
                return self._respond(start, RewardReason.PARSE_FAILURE)
            key = (canonicalize(gen.full_text), canonicalize(req.ground_truth.full_text))
            with self._lock:
                reason = self._results.get(key)
                fut = None
                if reason is not None:
                    self.hits += 1
                elif key in self._inflight:
                    self.hits += 1
                    fut = self._inflight[key]
                else:
                    self.misses += 1
                    fut = self._pool.submit(self._evaluate, gen, req.ground_truth)
                    self._inflight[key] = fut
                    fut.add_done_callback(lambda f, key=key: self._settle(key, f))
            if fut is not None:
                try:
                    reason = fut.result(timeout=max(0.0, start + timeout - time.monotonic()))
                except FutureTimeout:
                    reason = RewardReason.TIMEOUT
            return self._respond(start, reason)
        finally:
            with self._lock:
                self.in_flight -= 1

    def compute_batch(self, reqs: Sequence[RewardRequest]) -> list[RewardResponse]:
        """Answer in request order; duplicate pairs inside the batch are computed once."""
        firsts: dict[_Key, int] = {}
        owner: list[int] = []
        for i, r in enumerate(reqs):
            try:
                gen = extract_formal_statement(r.generated_raw)
                key: _Key = (canonicalize(gen.full_text), canonicalize(r.ground_truth.full_text))
            except ParseError:
                key = ("\0parse", str(i))
            owner.append(firsts.setdefault(key, i))
        unique = sorted(set(owner))
        futures = {i: self._fanout.submit(self.compute_reward, reqs[i]) for i in unique}
        results = {i: f.result() for i, f in futures.items()}
        dupes = len(reqs) - len(unique)
        with self._lock:
            self.hits += dupes
            self.requests += dupes
        return [results[o] for o in owner]

    def stats(self) -> dict:
        with self._lock:
            lat = list(self._latencies)
            lookups = self.hits + self.misses
            return {
                "requests": self.requests,
                "cache_hits": self.hits,
                "cache_misses": self.misses,
                "cache_hit_rate": self.hits / lookups if lookups else 0.0,
                "computations": self.computations,
                "in_flight": self.in_flight,
                "latency_ms_p50": _percentile(lat, 0.50),
                "latency_ms_p95": _percentile(lat, 0.95),
                "degraded": self.degraded,
            }

    def healthy(self) -> bool:
        return not self.degraded and self.engine.verifier.healthy

    def close(self) -> None:
        self._fanout.shutdown(wait=True)
        self._pool.shutdown(wait=True)


class RewardIn(BaseModel):
    generated: str
    ground_truth: str
    ground_truth_header: str = ""
    timeout_s: int | None = Field(default=None, ge=1)


class BatchIn(BaseModel):
    requests: list[RewardIn]


def create_app(service: RewardService):
    """FastAPI application exposing ``service``."""
    from fastapi import FastAPI, HTTPException

    def to_request(body: RewardIn) -> RewardRequest:
        try:
            gt = FormalStatement.from_json({"header": body.ground_truth_header.strip("\n"), "body": body.ground_truth.strip()})
        except (ValueError, ParseError) as exc:
            raise HTTPException(status_code=422, detail=f"malformed ground truth: {exc}") from exc
        return RewardRequest(body.generated, gt, body.timeout_s)

    @asynccontextmanager
    async def lifespan(app):
        yield
        service.close()

    app = FastAPI(title="beqkit reward", lifespan=lifespan)

    @app.post("/reward")
    def reward(body: RewardIn) -> dict:
        return service.compute_reward(to_request(body)).to_json()

    @app.post("/reward/batch")
    def reward_batch(body: BatchIn) -> dict:
        reqs = [to_request(b) for b in body.requests]
        return {"responses": [r.to_json() for r in service.compute_batch(reqs)]}

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok" if service.healthy() else "degraded"}

    @app.get("/stats")
    def stats() -> dict:
        return service.stats()

    return app


def serve(service: RewardService, host: str = "127.0.0.1", port: int | None = None) -> None:
    """Run the HTTP service until interrupted; in-flight requests drain on shutdown."""
    import uvicorn

    port = port or int(os.environ.get(PORT_ENV, DEFAULT_PORT))
    uvicorn.run(create_app(service), host=host, port=port, log_level="info", timeout_graceful_shutdown=30)
