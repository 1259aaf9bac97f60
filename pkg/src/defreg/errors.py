"""Exception types shared across the package.

The CLI maps these onto exit codes (validation 2, numerical 3, file I/O 4),
so raising the right class matters more than the message text.
"""


class ValidationError(ValueError):
    """Bad input: out-of-range value, wrong shape, inconsistent arguments."""


class NumericalError(ArithmeticError):
    """Computation failed: divergence, solver breakdown, degenerate data."""


class FileFormatError(IOError):
    """A file exists but does not parse as the expected format."""
