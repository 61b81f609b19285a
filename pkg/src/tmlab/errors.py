"""Exception taxonomy shared across modules and mapped to CLI exit codes."""


class UsageError(ValueError):
    """Bad flags, bad config keys, or otherwise malformed invocations (exit 1)."""


class DataError(ValueError):
    """Malformed or inconsistent input data: TSV, vocab, checkpoints (exit 2)."""


class NumericError(RuntimeError):
    """Numerical failure during compute, e.g. NaN loss (exit 3)."""
