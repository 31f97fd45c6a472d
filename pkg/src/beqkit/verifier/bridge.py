from __future__ import annotations

import enum
import logging
import os
import re
import shlex
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass
from typing import Protocol

from beqkit.core import FormalStatement, VerificationVerdict
from beqkit.verifier.errors import BackendUnavailable, CheckTimeout, ProtocolError
from beqkit.verifier.mock import MockChecker, MockSession, MockTable

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 60
ENDPOINT_ENV = "BEQKIT_LEAN_ENDPOINT"
_SORRY_RE = re.compile(r"\bsorry\b")


class Session(Protocol):
    def run(self, code: str, timeout_s: float) -> dict: ...

    def close(self) -> None: ...


@dataclass(frozen=True)
class CheckRequest:
    code: str
    timeout_s: int = DEFAULT_TIMEOUT_S

    def __post_init__(self) -> None:
        if not self.code:
            raise ValueError("CheckRequest.code must be non-empty")
        if self.timeout_s < 1:
            raise ValueError("CheckRequest.timeout_s must be >= 1")


class BackendKind(str, enum.Enum):
    LEAN_REPL = "lean"
    REMOTE = "remote"
    MOCK = "mock"


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind = BackendKind.MOCK
    endpoint: str | None = None
    worker_count: int = 1
    default_timeout_s: int = DEFAULT_TIMEOUT_S
    lean_command: str = "lake exe repl"
    lean_project: str | None = None
    warm_imports: tuple[str, ...] = ("import Mathlib",)

    def __post_init__(self) -> None:
        if self.kind is BackendKind.REMOTE and not self.endpoint:
            raise ValueError("remote backend requires an endpoint")
        if self.worker_count < 1 or self.default_timeout_s < 1:
            raise ValueError("worker_count and default_timeout_s must be positive")

    @classmethod
    def from_env(cls, kind: str | None = None, **kwargs) -> "BackendConfig":
        """Resolve ``kind="auto"``: remote when BEQKIT_LEAN_ENDPOINT is set, else local REPL."""
        endpoint = kwargs.pop("endpoint", None) or os.environ.get(ENDPOINT_ENV)
        if kind in (None, "auto"):
            kind = "remote" if endpoint else "lean"
        return cls(kind=BackendKind(kind), endpoint=endpoint, **kwargs)


def verdict_from_response(resp: dict, code: str, elapsed_ms: int) -> VerificationVerdict:
    if not isinstance(resp, dict):
        raise ProtocolError(f"checker response is not an object: {resp!r}")
    if "messages" not in resp:
        if "message" in resp:
            # REPL-level failure such as an unknown environment
            return VerificationVerdict(False, bool(_SORRY_RE.search(code)), (str(resp["message"]),), elapsed_ms)
        raise ProtocolError(f"checker response has no messages: {resp!r}")
    messages = resp["messages"]
    if not isinstance(messages, list) or not all(isinstance(m, dict) and "data" in m for m in messages):
        raise ProtocolError("checker messages are malformed")
    passed = not any(m.get("severity") == "error" for m in messages)
    if "sorries" in resp:
        has_sorry = bool(resp["sorries"]) or any(
            m.get("severity") == "warning" and "declaration uses 'sorry'" in str(m["data"]) for m in messages
        )
    else:
        has_sorry = bool(_SORRY_RE.search(code))
    return VerificationVerdict(
        passed=passed,
        has_sorry=has_sorry,
        diagnostics=tuple(str(m["data"]) for m in messages),
        elapsed_ms=elapsed_ms,
    )


class Verifier:
    """Pool of checker sessions shared by any number of calling threads.

    At most ``worker_count`` checks run at once; excess callers block until a
    session frees up. A session that dies is replaced and the request retried
    once before :class:`BackendUnavailable` is raised.
    """

    def __init__(
        self,
        session_factory: Callable[[], Session],
        worker_count: int = 1,
        default_timeout_s: int = DEFAULT_TIMEOUT_S,
        grace_s: float = 2.0,
    ):
        if worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        self._factory = session_factory
        self.worker_count = worker_count
        self.default_timeout_s = default_timeout_s
        self.grace_s = grace_s
        self._slots = threading.BoundedSemaphore(worker_count)
        self._idle: list[Session] = []
        self._lock = threading.Lock()
        self._all: list[Session] = []
        self.healthy = True
        self.checks = 0

    def _acquire(self) -> Session:
        with self._lock:
            if self._idle:
                return self._idle.pop()
        session = self._factory()
        with self._lock:
            self._all.append(session)
        return session

    def _release(self, session: Session) -> None:
        with self._lock:
            self._idle.append(session)

    def _discard(self, session: Session) -> None:
        try:
            session.close()
        except Exception:  # noqa: BLE001 - dead sessions may fail to close
            pass
        with self._lock:
            if session in self._all:
                self._all.remove(session)

    def check(self, req: CheckRequest | str, timeout_s: int | None = None) -> VerificationVerdict:
        if isinstance(req, str):
            req = CheckRequest(req, timeout_s or self.default_timeout_s)
        start = time.monotonic()
        deadline = start + req.timeout_s
        with self._slots:
            self.checks += 1
            resp = None
            for attempt in range(2):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                try:
                    session = self._acquire()
                except BackendUnavailable:
                    if attempt == 1:
                        self.healthy = False
                        raise
                    continue
                try:
                    resp = session.run(req.code, remaining)
                except CheckTimeout:
                    self._discard_if_dead(session)
                    elapsed = _ms_since(start)
                    return VerificationVerdict(False, False, ("timeout",), elapsed, timed_out=True)
                except BackendUnavailable:
                    self._discard(session)
                    logger.warning("checker session died (attempt %d)", attempt + 1)
                    if attempt == 1:
                        self.healthy = False
                        raise
                    continue
                except ProtocolError:
                    self._discard(session)
                    raise
                self._release(session)
                self.healthy = True
                break
        elapsed = _ms_since(start)
        if resp is None:
            return VerificationVerdict(False, False, ("timeout",), elapsed, timed_out=True)
        if resp.get("timed_out"):
            return VerificationVerdict(False, False, ("timeout",), elapsed, timed_out=True)
        verdict = verdict_from_response(resp, req.code, elapsed)
        if elapsed > req.timeout_s * 1000:
            return VerificationVerdict(False, verdict.has_sorry, verdict.diagnostics, elapsed, timed_out=True)
        return verdict

    def _discard_if_dead(self, session: Session) -> None:
        if getattr(session, "alive", True):
            self._release(session)
        else:
            self._discard(session)

    def syntax_check(self, s: FormalStatement, timeout_s: int | None = None) -> VerificationVerdict:
        return self.check(CheckRequest(s.full_text, timeout_s or self.default_timeout_s))

    def close(self) -> None:
        with self._lock:
            sessions, self._all, self._idle = self._all, [], []
        for s in sessions:
            try:
                s.close()
            except Exception:  # noqa: BLE001
                pass

    def __enter__(self) -> "Verifier":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _ms_since(start: float) -> int:
    return int((time.monotonic() - start) * 1000)


def mock_verifier(
    table: MockTable | None = None,
    worker_count: int = 1,
    default_timeout_s: int = DEFAULT_TIMEOUT_S,
    checker: MockChecker | None = None,
) -> Verifier:
    checker = checker or MockChecker(table)
    v = Verifier(lambda: MockSession(checker), worker_count, default_timeout_s)
    v.mock = checker  # type: ignore[attr-defined]
    return v


def make_verifier(config: BackendConfig, mock_table: MockTable | None = None) -> Verifier:
    if config.kind is BackendKind.MOCK:
        return mock_verifier(mock_table, config.worker_count, config.default_timeout_s)
    if config.kind is BackendKind.REMOTE:
        from beqkit.verifier.remote import RemoteSession

        assert config.endpoint is not None
        return Verifier(lambda: RemoteSession(config.endpoint), config.worker_count, config.default_timeout_s)
    from beqkit.verifier.repl import LeanReplSession

    command = shlex.split(config.lean_command)
    return Verifier(
        lambda: LeanReplSession(command, cwd=config.lean_project, warm_imports=config.warm_imports),
        config.worker_count,
        config.default_timeout_s,
    )
