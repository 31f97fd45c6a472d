"""Autoformalization pipeline tooling: BEq checking, majority-vote selection,
BEq@k evaluation, dataset preparation and an RL reward service."""

from beqkit.core import (
    Candidate,
    CandidateSet,
    EquivalencePartition,
    FormalStatement,
    InformalProblem,
    ProblemType,
    VerificationVerdict,
    canonicalize,
    extract_formal_statement,
    rename_theorem,
)

__version__ = "0.1.0"

__all__ = [
    "Candidate",
    "CandidateSet",
    "EquivalencePartition",
    "FormalStatement",
    "InformalProblem",
    "ProblemType",
    "VerificationVerdict",
    "canonicalize",
    "extract_formal_statement",
    "rename_theorem",
]
