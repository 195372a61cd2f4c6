"""Exception types shared across the package.

The CLI maps these onto process exit codes: ValidationError -> 2,
NumericalError -> 3.
"""


class ValidationError(ValueError):
    """Raised when an input file, record, or argument violates a contract."""


class NumericalError(RuntimeError):
    """Raised when a numeric procedure fails (divergence, non-finite values)."""
