"""Uniform access to a Lean checker: local REPL, remote server, or mock."""

from beqkit.verifier.bridge import (
    DEFAULT_TIMEOUT_S,
    BackendConfig,
    BackendKind,
    CheckRequest,
    Verifier,
    make_verifier,
    mock_verifier,
    verdict_from_response,
)
from beqkit.verifier.errors import BackendError, BackendUnavailable, CheckTimeout, ProtocolError
from beqkit.verifier.mock import MockChecker, MockSession, MockTable, mock_equivalence_oracle

__all__ = [
    "DEFAULT_TIMEOUT_S",
    "BackendConfig",
    "BackendError",
    "BackendKind",
    "BackendUnavailable",
    "CheckRequest",
    "CheckTimeout",
    "MockChecker",
    "MockSession",
    "MockTable",
    "ProtocolError",
    "Verifier",
    "make_verifier",
    "mock_equivalence_oracle",
    "mock_verifier",
    "verdict_from_response",
]
