"""Exception hierarchy.

Every error carries a stable ``code`` (the class name) so the CLI can emit a
one-line machine-parsable message.
"""

from __future__ import annotations


class StagSynthError(Exception):
    """Base class for all package errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


class ValidationError(StagSynthError):
    """Input data or parameters violate a precondition."""


class ParseError(ValidationError):
    pass


class MissingCell(ValidationError):
    pass


class ConflictingAdoption(ValidationError):
    pass


class AdoptionOutOfRange(ValidationError):
    pass


class IrregularPeriods(ValidationError):
    pass


class NoTreatedUnits(ValidationError):
    pass


class EmptyDonorPool(ValidationError):
    pass


class WindowTooShort(ValidationError):
    pass


class LagOutOfRange(ValidationError):
    pass


class HorizonOutOfRange(ValidationError):
    pass


class DonorRuleViolation(ValidationError):
    pass


class InvalidWeights(ValidationError):
    pass


class NuOutOfRange(ValidationError):
    pass


class NonFiniteInput(ValidationError):
    pass


class DispersionViolation(ValidationError):
    pass


class InvalidScale(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class DidNotConverge(StagSynthError):
    """Raised only on request; the solver normally returns ``converged=False``."""
