"""Chat-completion client with token-bucket throttling, retries and an audit log."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol

import httpx

from beqkit.core import CandidateSet, InformalProblem
from beqkit.gateway.prompts import build_autoformalization_prompt

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "BEQKIT_LLM_ENDPOINT"
API_KEY_ENV = "BEQKIT_LLM_API_KEY"


@dataclass(frozen=True)
class GenerationConfig:
    temperature: float = 0.6
    max_context_tokens: int = 16384
    n_samples: int = 16
    model_id: str = "default"
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= self.temperature <= 2:
            raise ValueError("temperature must lie in [0, 2]")
        if self.n_samples < 1 or self.max_context_tokens < 1:
            raise ValueError("n_samples and max_context_tokens must be positive")

    @classmethod
    def rl_rollout(cls, **overrides) -> "GenerationConfig":
        return cls(**{"temperature": 1.0, **overrides})

    def to_json(self) -> dict:
        d = asdict(self)
        d["stop_sequences"] = list(self.stop_sequences)
        return d


@dataclass(frozen=True)
class ChatExchange:
    request_messages: tuple[tuple[str, str], ...]
    response_texts: tuple[str, ...] = ()
    usage: dict[str, int] = field(default_factory=dict)
    latency_ms: int = 0
    model_id: str = ""
    retries: int = 0
    error: str | None = None

    @property
    def response_text(self) -> str:
        return self.response_texts[0] if self.response_texts else ""

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> dict:
        return {
            "request_messages": [list(m) for m in self.request_messages],
            "response_text": self.response_text,
            "response_texts": list(self.response_texts),
            "usage": self.usage,
            "latency_ms": self.latency_ms,
            "model_id": self.model_id,
            "retries": self.retries,
            "error": self.error,
        }


class GatewayError(RuntimeError):
    pass


class TransientError(GatewayError):
    """A failure worth retrying (transport error, 5xx, rate limiting)."""


class ProviderExhausted(GatewayError):
    pass


class QuotaExceeded(GatewayError):
    pass


@dataclass(frozen=True)
class Completion:
    texts: tuple[str, ...]
    usage: dict[str, int] = field(default_factory=dict)


class ChatBackend(Protocol):
    max_n: int

    def complete(self, messages: Sequence[tuple[str, str]], cfg: GenerationConfig, n: int) -> Completion: ...


class HttpChatBackend:
    """OpenAI-style ``/chat/completions`` endpoint."""

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        timeout_s: float = 600.0,
        max_n: int = 16,
        transport: httpx.BaseTransport | None = None,
    ):
        endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise GatewayError(f"no LLM endpoint configured (set {ENDPOINT_ENV})")
        if not endpoint.rstrip("/").endswith("/chat/completions"):
            endpoint = endpoint.rstrip("/") + "/chat/completions"
        self.endpoint = endpoint
        self.max_n = max_n
        key = api_key or os.environ.get(API_KEY_ENV)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = httpx.Client(headers=headers, timeout=timeout_s, transport=transport)

    def complete(self, messages: Sequence[tuple[str, str]], cfg: GenerationConfig, n: int) -> Completion:
        payload = {
            "model": cfg.model_id,
            "messages": [{"role": r, "content": c} for r, c in messages],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_context_tokens,
            "n": n,
        }
        if cfg.stop_sequences:
            payload["stop"] = list(cfg.stop_sequences)
        try:
            resp = self._client.post(self.endpoint, json=payload)
        except httpx.TransportError as exc:
            raise TransientError(f"transport failure: {exc}") from exc
        if resp.status_code == 402 or (resp.status_code == 429 and "quota" in resp.text.lower()):
            raise QuotaExceeded(resp.text[:200])
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            texts = tuple(c["message"]["content"] or "" for c in data["choices"])
        except (ValueError, KeyError, TypeError) as exc:
            raise TransientError(f"malformed completion body: {exc}") from exc
        usage = {k: int(v) for k, v in (data.get("usage") or {}).items() if isinstance(v, int)}
        return Completion(texts, usage)

    def close(self) -> None:
        self._client.close()


class MockChatBackend:
    """Offline backend driven by a function of the prompt text.

    ``responder(prompt, n, call_index)`` returns the completions; ``failures``
    makes the first calls raise :class:`TransientError`.
    """

    def __init__(
        self,
        responder: Callable[[str, int, int], Sequence[str]],
        failures: int = 0,
        max_n: int = 16,
        quota_after: int | None = None,
    ):
        self.responder = responder
        self.failures = failures
        self.max_n = max_n
        self.quota_after = quota_after
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[tuple[str, str]], cfg: GenerationConfig, n: int) -> Completion:
        with self._lock:
            index = self.calls
            self.calls += 1
        if index < self.failures:
            raise TransientError(f"scripted failure {index + 1}")
        if self.quota_after is not None and index >= self.quota_after:
            raise QuotaExceeded("scripted quota exhaustion")
        prompt = messages[-1][1]
        texts = list(self.responder(prompt, n, index))
        if not texts:
            raise GatewayError("mock responder returned no completions")
        texts = [texts[i % len(texts)] for i in range(n)]
        return Completion(tuple(texts), {"prompt_tokens": len(prompt.split()), "completion_tokens": 0})


class TokenBucket:
    """Blocking token bucket: ``rate`` tokens per second, burst ``capacity``."""

    def __init__(
        self,
        rate: float,
        capacity: float | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._stamp = clock()
        self._lock = threading.Lock()

    def acquire(self, tokens: float = 1.0) -> float:
        """Take ``tokens``, sleeping as needed; returns the time waited."""
        if tokens > self.capacity:
            raise ValueError("request exceeds bucket capacity")
        waited = 0.0
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                if self._tokens >= tokens:
                    self._tokens -= tokens
                    return waited
                delay = (tokens - self._tokens) / self.rate
            self._sleep(delay)
            waited += delay


class AuditLog:
    """Append-only record of exchanges, optionally mirrored to a JSONL file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[ChatExchange] = []
        self._lock = threading.Lock()

    def append(self, exchange: ChatExchange) -> None:
        line = json.dumps(exchange.to_json(), ensure_ascii=False)
        with self._lock:
            self.records.append(exchange)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(line + "\n")

    def __len__(self) -> int:
        return len(self.records)


class ChatClient:
    """Shareable client; every attempt, failed or not, lands in the audit log."""

    def __init__(
        self,
        backend: ChatBackend,
        max_retries: int = 4,
        backoff_base_s: float = 1.0,
        backoff_max_s: float = 60.0,
        limiter: TokenBucket | None = None,
        audit: AuditLog | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.max_retries = max_retries
        self.backoff_base_s = backoff_base_s
        self.backoff_max_s = backoff_max_s
        self.limiter = limiter
        self.audit = audit if audit is not None else AuditLog()
        self._sleep = sleep

    def _call(self, messages: tuple[tuple[str, str], ...], cfg: GenerationConfig, n: int) -> tuple[str, ...]:
        for attempt in range(self.max_retries + 1):
            if self.limiter is not None:
                self.limiter.acquire()
            start = time.monotonic()
            base = ChatExchange(messages, model_id=cfg.model_id, retries=attempt)
            try:
                result = self.backend.complete(messages, cfg, n)
            except TransientError as exc:
                self.audit.append(replace(base, latency_ms=_ms(start), error=str(exc)))
                if attempt == self.max_retries:
                    raise ProviderExhausted(f"gave up after {attempt + 1} attempts: {exc}") from exc
                delay = min(self.backoff_max_s, self.backoff_base_s * 2**attempt)
                logger.warning("LLM call failed (%s); retrying in %.1fs", exc, delay)
                self._sleep(delay)
                continue
            except GatewayError as exc:
                self.audit.append(replace(base, latency_ms=_ms(start), error=str(exc)))
                raise
            self.audit.append(replace(base, response_texts=result.texts, usage=result.usage, latency_ms=_ms(start)))
            return result.texts
        raise AssertionError("unreachable")

    def sample(self, prompt: str, cfg: GenerationConfig, n: int | None = None) -> list[str]:
        """``n`` completions for a single user prompt, batched up to the backend's ``max_n``."""
        n = cfg.n_samples if n is None else n
        messages = (("user", prompt),)
        out: list[str] = []
        while len(out) < n:
            batch = min(n - len(out), max(1, self.backend.max_n))
            out.extend(self._call(messages, cfg, batch)[:batch])
        return out

    def ask(self, prompt: str, cfg: GenerationConfig) -> str:
        return self.sample(prompt, cfg, 1)[0]


def generate_candidates(
    x: InformalProblem,
    cfg: GenerationConfig,
    client: ChatClient,
    header_hint: str | None = None,
    forbid_proof: bool = False,
    coerce_sorry: bool = False,
) -> CandidateSet:
    prompt = build_autoformalization_prompt(x, header_hint, forbid_proof)
    outputs = client.sample(prompt, cfg)
    return CandidateSet.from_outputs(x.id, outputs, coerce_sorry=coerce_sorry)


def _ms(start: float) -> int:
    return int((time.monotonic() - start) * 1000)
