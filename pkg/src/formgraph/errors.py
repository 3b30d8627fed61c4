"""Exception types shared across the package.

The CLI maps these onto exit codes: UsageError -> 2, DataError -> 3.
"""


class FormgraphError(Exception):
    """Base class for errors raised by this package."""


class UsageError(FormgraphError):
    """A caller violated an API contract (bad shape, bad parameter, bad combination)."""


class DataError(FormgraphError):
    """An input file or annotation is malformed or internally inconsistent."""


class WeightFormatError(DataError):
    """A weight container is corrupt, truncated, or structurally invalid."""
