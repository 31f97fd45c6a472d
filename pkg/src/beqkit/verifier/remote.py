"""HTTP transport for a remote batch checking server (``POST /check``)."""

from __future__ import annotations

import math

import httpx

from beqkit.verifier.errors import BackendUnavailable, CheckTimeout, ProtocolError


class RemoteSession:
    def __init__(self, endpoint: str, grace_s: float = 2.0, transport: httpx.BaseTransport | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.grace_s = grace_s
        self._client = httpx.Client(base_url=self.endpoint, transport=transport)

    def run_batch(self, codes: list[str], timeout_s: float) -> list[dict]:
        try:
            resp = self._client.post(
                "/check",
                json={"codes": codes, "timeout": max(1, math.ceil(timeout_s))},
                timeout=timeout_s + self.grace_s,
            )
        except httpx.TimeoutException as exc:
            raise CheckTimeout(f"remote checker did not answer within {timeout_s}s") from exc
        except httpx.TransportError as exc:
            raise BackendUnavailable(f"cannot reach {self.endpoint}: {exc}") from exc
        if resp.status_code >= 500:
            raise BackendUnavailable(f"remote checker returned HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise ProtocolError(f"remote checker returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise ProtocolError("remote checker returned non-JSON body") from exc
        results = data.get("results") if isinstance(data, dict) else data
        if not isinstance(results, list) or len(results) != len(codes):
            raise ProtocolError("remote checker returned a result list of the wrong shape")
        out = []
        for item in results:
            if not isinstance(item, dict):
                raise ProtocolError(f"malformed per-code result: {item!r}")
            if isinstance(item.get("response"), dict):
                item = item["response"]
            elif item.get("error"):
                err = str(item["error"])
                if "timeout" in err.lower():
                    item = {"timed_out": True, "messages": [], "sorries": []}
                else:
                    item = {"messages": [{"severity": "error", "data": err}], "sorries": []}
            out.append(item)
        return out

    def run(self, code: str, timeout_s: float) -> dict:
        result = self.run_batch([code], timeout_s)[0]
        if result.get("timed_out"):
            raise CheckTimeout("remote checker reported a timeout")
        return result

    def close(self) -> None:
        self._client.close()
