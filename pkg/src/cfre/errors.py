"""Shared exception types.

Validation failures raise InputError (mapped to exit code 1 at the CLI);
numeric breakdowns raise NumericError (exit code 2).
"""


class InputError(ValueError):
    """A caller-supplied value violates a documented precondition."""


class DomainError(InputError):
    """An elementwise operation was applied outside its domain.

    index holds the flat position of the first offending entry.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NumericError(ArithmeticError):
    """A computation produced non-finite or otherwise unstable values."""


class SingularityError(NumericError):
    """A denominator collapsed below its stability tolerance."""
