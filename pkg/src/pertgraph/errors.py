"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage/config problems exit 1,
data problems exit 2, numerical failures exit 3.
"""

from __future__ import annotations


class UsageError(ValueError):
    """Caller violated a precondition (bad argument, bad config)."""


class ShapeError(UsageError):
    """Operands have incompatible dimensions."""


class DataError(ValueError):
    """Input data violates the documented file or content contract."""


class ParseError(DataError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateError(DataError):
    """Input is structurally valid but degenerate for the requested statistic."""


class NumericalError(RuntimeError):
    """Computation produced non-finite values (training divergence etc.)."""
