"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command line front end.
"""


class StochLockError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(StochLockError):
    """Malformed or inconsistent configuration."""

    exit_code = 2


class ParameterError(ConfigError):
    """Invalid model parameter (e.g. unsupported noise order)."""


class DegeneracyError(StochLockError):
    """Numerical degeneracy: degenerate roots, ambiguous fits, unsolvable homological data."""

    exit_code = 3


class ClassificationAmbiguous(DegeneracyError):
    """Leading power of the amplitude could not be identified as an integer."""


class HomologicalSolvabilityError(DegeneracyError):
    """Input to the homological solver has a nonzero mean over the fast phase."""


class OutOfTheoryError(StochLockError):
    """Request falls outside the hypotheses the stability results are stated for."""

    exit_code = 4


class UnsupportedOrderError(OutOfTheoryError):
    """Averaging requested beyond second order."""


class ChartError(StochLockError):
    """Energy-angle chart construction or query failure."""

    exit_code = 5


class DomainExceeded(StochLockError):
    """State left the ball of radius r0 where the model is defined."""

    exit_code = 6
