"""Prompt builders for every LLM role. All builders are pure functions."""

from __future__ import annotations

from collections.abc import Sequence
from functools import lru_cache
from importlib import resources

from beqkit.core import FormalStatement, InformalProblem

DEFAULT_THEOREM_NAME = "my_favorite_theorem"

AUTOFORMALIZATION_PREAMBLE = (
    "Please autoformalize the following problem in Lean 4 with a header. "
    "Use the following theorem names: {theorem_name}."
)
HEADER_HINT_SECTION = "Your code should start with:\n```Lean4\n{header}\n```"
NO_PROOF_SECTION = (
    "You should only output the theorem statement in Lean 4 format, ending with `sorry`. "
    "You should NOT output the proof."
)


@lru_cache(maxsize=None)
def load_asset(name: str) -> str:
    return resources.files("beqkit.gateway").joinpath("assets").joinpath(name).read_text(encoding="utf-8")


def render(template: str, **slots: str) -> str:
    """Fill ``{name}`` slots by plain replacement, so Lean braces survive."""
    for key, value in slots.items():
        template = template.replace("{" + key + "}", value)
    return template


def default_few_shots() -> list[str]:
    return [load_asset(f"few_shot_{i}.md").strip() for i in (1, 2, 3)]


def build_autoformalization_prompt(
    x: InformalProblem | str,
    header_hint: str | None = None,
    forbid_proof: bool = False,
    theorem_name: str = DEFAULT_THEOREM_NAME,
) -> str:
    text = x.text if isinstance(x, InformalProblem) else x
    parts = [render(AUTOFORMALIZATION_PREAMBLE, theorem_name=theorem_name), text.strip()]
    if header_hint is not None and header_hint.strip():
        parts.append(render(HEADER_HINT_SECTION, header=header_hint.strip("\n")))
    if forbid_proof:
        parts.append(NO_PROOF_SECTION)
    return "\n\n".join(parts)


def build_reasoning_synthesis_prompt(
    x: InformalProblem | str,
    y: FormalStatement,
    few_shots: Sequence[str] | None = None,
) -> str:
    """Reasoning-trajectory request for an (informal, formal) pair.

    ``few_shots`` defaults to the three packaged exemplars; any number >= 1
    may be given and they are numbered in order.
    """
    shots = default_few_shots() if few_shots is None else list(few_shots)
    if not shots:
        raise ValueError("at least one few-shot example is required")
    template = load_asset("reasoning_synthesis.md")
    head, rest = template.split("[Example 1]", 1)
    _, task = rest.split("[YOUR TASK HERE]", 1)
    examples = "\n\n".join(f"[Example {i}]\n\n{shot.strip()}" for i, shot in enumerate(shots, start=1))
    text = x.text if isinstance(x, InformalProblem) else x
    task = render(task, informal_statement=text.strip(), formal_statement=y.full_text)
    return f"{head}{examples}\n\n[YOUR TASK HERE]{task}"


def build_validity_judge_prompt(x: InformalProblem | str, y: FormalStatement) -> str:
    text = x.text if isinstance(x, InformalProblem) else x
    return render(load_asset("validity_judge.md"), informal_statement=text.strip(), formal_statement=y.full_text)


def build_error_classifier_prompt(
    x: InformalProblem | str,
    y: FormalStatement,
    diagnostics: Sequence[str] = (),
) -> str:
    text = x.text if isinstance(x, InformalProblem) else x
    diag = "\n".join(d.strip() for d in diagnostics if d.strip()) or "(none)"
    return render(
        load_asset("error_classifier.md"),
        informal_statement=text.strip(),
        formal_statement=y.full_text,
        diagnostics=diag,
    )
