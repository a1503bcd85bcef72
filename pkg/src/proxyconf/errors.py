"""Exception hierarchy.

Errors split into two families so the CLI can map them onto distinct exit
codes: :class:`InputError` for bad data or configuration, and
:class:`NumericalError` for failures of the estimation machinery itself.
"""


class ProxyConfError(Exception):
    """Base class for all package errors."""


class InputError(ProxyConfError):
    pass


class NumericalError(ProxyConfError):
    pass


# input family
class InvalidConfig(InputError):
    pass


class InvalidCohort(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class MissingTruth(InputError):
    pass


class InsufficientData(InputError):
    pass


class EnumerationTooLarge(InputError):
    pass


class EmptySubgroup(InputError):
    pass


# numerical family
class SingularMatrix(NumericalError):
    pass


class ZeroRow(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class ExcessiveClamping(NumericalError):
    pass


class DegenerateCell(NumericalError):
    pass


class DegenerateRisk(NumericalError):
    pass


class NonDiagonalizable(NumericalError):
    pass


class NonPositiveEigenvalue(NumericalError):
    pass


class IllConditionedFit(NumericalError):
    pass


class TooFewReplicates(NumericalError):
    pass


class NotConvergedWarning(RuntimeWarning):
    """Newton iterations hit ``max_iter``; the model carries ``converged=False``."""


class NegativeTransition(NumericalError):
    """A fractional matrix power produced clearly negative transition probabilities."""
