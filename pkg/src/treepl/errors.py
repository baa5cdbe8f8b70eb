"""Exception types shared across the package.

The CLI maps these onto process exit codes: validation problems exit with 2,
I/O and format problems with 3 and numerical failures with 4.
"""


class TreeplError(Exception):
    exit_code = 1


class ValidationError(TreeplError, ValueError):
    """Input violates a documented invariant."""

    exit_code = 2


class FormatError(TreeplError, OSError):
    """A file on disk does not match its declared format."""

    exit_code = 3


class NumericalError(TreeplError, ArithmeticError):
    exit_code = 4
