"""Shared exception types."""


class DualDistillError(Exception):
    """Base class for all library errors."""


class ShapeError(DualDistillError):
    """Operands have incompatible shapes."""


class NumericError(DualDistillError):
    """A computation produced NaN/Inf, or diverged."""


class ContractError(DualDistillError):
    """An operation was called outside its contract."""


class FormatError(DualDistillError):
    """A file does not match the expected on-disk format."""


class UsageError(DualDistillError):
    """Malformed configuration or command-line usage."""
