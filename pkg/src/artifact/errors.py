"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries the code it
should produce when it escapes a command.
"""

from __future__ import annotations


class ArtifactError(Exception):
    exit_code = 4


class InputError(ArtifactError, ValueError):
    """Malformed input: bad token ids, bad file contents, bad arguments."""

    exit_code = 2


class LengthError(InputError):
    """A sequence is longer than the model horizon."""


class StructureError(InputError):
    """Model parameters violate a structural requirement."""


class ConstraintError(InputError):
    """A constraint violates the non-overlap requirements."""


class CapacityError(InputError):
    """Too many clauses for the configured mask width."""


class HorizonError(InputError):
    """A query was issued past the end of the sequence horizon."""


class InfeasibleError(ArtifactError):
    """The constraint cannot be satisfied from the current state."""

    exit_code = 3


class DeadEndError(InfeasibleError):
    """Every next token has probability zero under the guided distribution."""


class BridgeError(ArtifactError):
    """An external language model broke the line protocol."""

    exit_code = 2


class SourceError(ArtifactError):
    """A data source (teacher model, child process) failed."""

    exit_code = 2


class OracleGuardError(InputError):
    """Brute-force enumeration would exceed its size guard."""
