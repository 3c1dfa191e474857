"""Exception hierarchy.

Two families: ``ValidationError`` for bad inputs (CLI exit code 2) and
``NumericalError`` for failures of the linear algebra on valid inputs
(CLI exit code 3).
"""

from __future__ import annotations


class ContaminationBiasError(Exception):
    """Base class for all package errors."""


class ValidationError(ContaminationBiasError, ValueError):
    pass


class NumericalError(ContaminationBiasError, ArithmeticError):
    pass


class NonFinite(ValidationError):
    pass


class NonPositiveWeight(ValidationError):
    pass


class MissingColumn(ValidationError):
    pass


class EmptyAfterFiltering(ValidationError):
    pass


class SingletonArm(ValidationError):
    pass


class NonIntegralCells(ValidationError):
    pass


class SpecValidationError(ValidationError):
    """Population spec failed validation; ``pointer`` is a JSON pointer."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class RankDeficient(NumericalError):
    """Design matrix lacks full column rank.

    ``columns`` names the columns found to be (near) linearly dependent.
    """

    def __init__(self, message: str, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class EmptyCell(NumericalError):
    def __init__(self, message: str, cells=()):
        super().__init__(message)
        self.cells = list(cells)


class NonPositivePropensity(NumericalError):
    pass


class SingularAverageVariance(NumericalError):
    pass


class ZeroVariance(NumericalError):
    pass


class ZeroPropensity(NumericalError):
    pass


class ZeroMeanWeights(NumericalError):
    pass


class BootstrapCellFailure(NumericalError):
    """Too many bootstrap replicates had to be redrawn."""
