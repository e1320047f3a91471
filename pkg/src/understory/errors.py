"""Exception hierarchy shared across the package.

Each class carries the process exit code the CLI maps it to, so library
errors surface as stable, machine-checkable failures.
"""


class UnderstoryError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class InputFormatError(UnderstoryError):
    """Unreadable or ill-formed input: bad magic, bad checksum, unparsable text."""

    exit_code = 3


class MissingInputError(InputFormatError):
    """A required input file or directory does not exist."""


class InvariantError(UnderstoryError):
    """A precondition or data invariant was violated (dims, ranges, ordering)."""

    exit_code = 4


class NumericError(UnderstoryError):
    """A numeric requirement failed (degenerate statistics, divergence)."""

    exit_code = 5
