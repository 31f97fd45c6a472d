"""LLM roles: candidate generation, validity judging, reasoning synthesis and error classification."""

from beqkit.gateway.client import (
    AuditLog,
    ChatClient,
    ChatExchange,
    Completion,
    GatewayError,
    GenerationConfig,
    HttpChatBackend,
    MockChatBackend,
    ProviderExhausted,
    QuotaExceeded,
    TokenBucket,
    TransientError,
    generate_candidates,
)
from beqkit.gateway.prompts import (
    build_autoformalization_prompt,
    build_error_classifier_prompt,
    build_reasoning_synthesis_prompt,
    build_validity_judge_prompt,
    default_few_shots,
)
from beqkit.gateway.verdicts import (
    ERROR_TAXONOMY,
    JUDGE_LABELS,
    NO_ERROR,
    ErrorClass,
    JudgeVerdict,
    UnparseableVerdict,
    parse_error_class,
    parse_judge_verdict,
)

__all__ = [
    "ERROR_TAXONOMY",
    "JUDGE_LABELS",
    "NO_ERROR",
    "AuditLog",
    "ChatClient",
    "ChatExchange",
    "Completion",
    "ErrorClass",
    "GatewayError",
    "GenerationConfig",
    "HttpChatBackend",
    "JudgeVerdict",
    "MockChatBackend",
    "ProviderExhausted",
    "QuotaExceeded",
    "TokenBucket",
    "TransientError",
    "UnparseableVerdict",
    "build_autoformalization_prompt",
    "build_error_classifier_prompt",
    "build_reasoning_synthesis_prompt",
    "build_validity_judge_prompt",
    "default_few_shots",
    "generate_candidates",
    "parse_error_class",
    "parse_judge_verdict",
]
