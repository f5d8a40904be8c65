"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: argument errors -> 2, data errors -> 3,
numerical infeasibility -> 4, anything else -> 1.
"""


class TailFactorError(Exception):
    """Base class for all package errors."""


class ArgumentError(TailFactorError, ValueError):
    """Invalid argument or configuration value."""


class DataError(TailFactorError):
    """Malformed or inconsistent input data."""


class NonFiniteValueError(DataError):
    """A panel cell is NaN or infinite."""


class DuplicateCellError(DataError):
    """The same (unit, time) pair appears more than once."""


class IncompleteGridError(DataError):
    """A (unit, time) pair is missing from a long-format panel."""


class InfeasibleError(TailFactorError):
    """A numerical problem has no feasible solution."""


class RankError(InfeasibleError):
    """A factor matrix is rank deficient."""
