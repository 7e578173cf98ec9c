"""Exception types shared across the package.

The CLI maps these onto its exit codes: usage problems exit 1, data/file
problems exit 2, numerical failures exit 3.
"""


class DataError(Exception):
    """A file or payload is missing, malformed, or inconsistent."""


class NumericalError(Exception):
    """A computation produced NaN/Inf or failed a numerical check."""
