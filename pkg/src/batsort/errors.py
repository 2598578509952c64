"""Shared exception types.

Two broad families matter to callers: input files or configs that cannot
be understood (SchemaError), and computations that cannot produce a valid
result for the given inputs (NumericalFailure).  The CLI maps these onto
distinct exit codes.
"""


class BatsortError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(BatsortError):
    """A file, header, or config section does not match the documented layout."""


class NumericalFailure(BatsortError):
    """A numerically infeasible or divergent situation, not a coding bug."""
