"""Shared exception types."""


class DataFormatError(ValueError):
    """An input file violates its documented format (bad syntax, bad values)."""
