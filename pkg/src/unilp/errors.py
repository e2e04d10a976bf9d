"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies rather than bare ValueError.
"""


class UnilpError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(UnilpError):
    """Invalid parameters, shapes, or option combinations."""


class DataError(UnilpError):
    """Malformed or infeasible input data (files, graphs, splits)."""


class NumericError(UnilpError):
    """Non-finite values or numeric invariant violations."""
