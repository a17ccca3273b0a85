"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ArgumentError -> 1 (usage),
FormatError/DataError -> 2, NumericalError -> 3.
"""


class TcsepError(Exception):
    pass


class ArgumentError(TcsepError, ValueError):
    """Caller passed an out-of-contract argument (bad shape, range, id)."""


class FormatError(TcsepError):
    """A file does not conform to its binary or text layout."""


class DataError(TcsepError):
    """File contents are well-formed but inconsistent or non-finite."""


class NumericalError(TcsepError, ArithmeticError):
    """A computation diverged or lost rank beyond recovery."""


class TrainingError(NumericalError):
    """Non-finite loss during optimization; names the offending term."""

    def __init__(self, message: str, term: str | None = None):
        super().__init__(message)
        self.term = term
