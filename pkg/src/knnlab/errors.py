"""Shared exception types."""


class FormatError(RuntimeError):
    """A persisted artifact has a bad magic, version, or is truncated."""


class DataHashError(RuntimeError):
    """Content hashes of chained artifacts do not match."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
