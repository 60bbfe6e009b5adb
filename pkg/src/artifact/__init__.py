"""Exact constrained decoding with hidden Markov model guidance."""

from .constraints import Cnf, compile_constraint, load_constraint, satisfies
from .dp import DpCache, GenerationState, precompute, precompute_ordered
from .errors import ArtifactError
from .hmm import Hmm, random_hmm

__version__ = "0.1.0"

__all__ = [
    "ArtifactError",
    "Cnf",
    "DpCache",
    "GenerationState",
    "Hmm",
    "compile_constraint",
    "load_constraint",
    "precompute",
    "precompute_ordered",
    "random_hmm",
    "satisfies",
    "__version__",
]
