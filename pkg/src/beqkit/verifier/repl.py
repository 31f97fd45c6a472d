"""Lean 4 REPL subprocess transport.

Requests are written as one JSON object per line followed by a blank line;
responses are read until the blank line that terminates each JSON object.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import subprocess
import threading
import time
from collections.abc import Sequence

from beqkit.verifier.errors import BackendUnavailable, CheckTimeout, ProtocolError

logger = logging.getLogger(__name__)

_EOF = object()


class LeanReplSession:
    """One warm REPL process.

    When ``warm_imports`` is given, the imports are elaborated once at spawn
    and later snippets whose imports are a subset run against that
    environment instead of re-importing.
    """

    def __init__(
        self,
        command: Sequence[str],
        cwd: str | None = None,
        warm_imports: Sequence[str] | None = None,
        startup_timeout_s: float = 600.0,
    ):
        self.command = list(command)
        self.cwd = cwd
        self.warm_imports = [line.strip() for line in warm_imports or ()]
        self.startup_timeout_s = startup_timeout_s
        self._base_env: int | None = None
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue = queue.Queue()
        self._spawn()

    def _spawn(self) -> None:
        try:
            self._proc = subprocess.Popen(
                self.command,
                cwd=self.cwd,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                encoding="utf-8",
                bufsize=1,
                env={**os.environ},
            )
        except OSError as exc:
            raise BackendUnavailable(f"cannot start REPL {self.command!r}: {exc}") from exc
        self._lines = queue.Queue()
        threading.Thread(target=self._pump, args=(self._proc, self._lines), daemon=True).start()
        if self.warm_imports:
            resp = self._request({"cmd": "\n".join(self.warm_imports)}, time.monotonic() + self.startup_timeout_s)
            env = resp.get("env")
            if isinstance(env, int):
                self._base_env = env
            else:
                logger.warning("REPL warm-up returned no environment; falling back to cold checks")

    @staticmethod
    def _pump(proc: subprocess.Popen, lines: queue.Queue) -> None:
        assert proc.stdout is not None
        for line in proc.stdout:
            lines.put(line)
        lines.put(_EOF)

    @property
    def alive(self) -> bool:
        return self._proc is not None and self._proc.poll() is None

    def _request(self, payload: dict, deadline: float) -> dict:
        if not self.alive:
            raise BackendUnavailable("REPL process is not running")
        assert self._proc is not None and self._proc.stdin is not None
        try:
            self._proc.stdin.write(json.dumps(payload, ensure_ascii=False) + "\n\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self.close()
            raise BackendUnavailable(f"REPL stdin closed: {exc}") from exc
        buf: list[str] = []
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                self.close()
                raise CheckTimeout("REPL did not answer before the deadline")
            try:
                line = self._lines.get(timeout=remaining)
            except queue.Empty:
                continue
            if line is _EOF:
                self.close()
                raise BackendUnavailable("REPL process exited")
            if not line.strip():
                if buf:
                    break
                continue
            buf.append(line)
            if line.rstrip().endswith("}"):
                try:
                    return _as_object("".join(buf))
                except json.JSONDecodeError:
                    continue
        try:
            return _as_object("".join(buf))
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed REPL response: {''.join(buf)[:200]!r}") from exc

    def run(self, code: str, timeout_s: float) -> dict:
        payload: dict = {"cmd": code, "timeout": int(timeout_s)}
        if self._base_env is not None:
            lines = code.splitlines()
            imports = [l.strip() for l in lines if l.startswith("import ")]
            if set(imports) <= set(self.warm_imports):
                rest = "\n".join(l for l in lines if not l.startswith("import "))
                payload = {"cmd": rest, "env": self._base_env, "timeout": int(timeout_s)}
        return self._request(payload, time.monotonic() + timeout_s)

    def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            proc.kill()
            proc.wait(timeout=5)
        except (OSError, subprocess.TimeoutExpired):
            pass


def _as_object(text: str) -> dict:
    obj = json.loads(text)
    if not isinstance(obj, dict):
        raise ProtocolError(f"REPL response is not an object: {text[:200]!r}")
    return obj
