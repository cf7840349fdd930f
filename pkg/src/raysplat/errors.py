from __future__ import annotations


class DomainError(ValueError):
    """An input lies outside the domain an operation is defined on."""


class DimensionError(ValueError):
    """Array shapes or channel counts do not chain."""


class ContractViolation(RuntimeError):
    """A backward pass was given a cache that does not match its forward."""


class FormatError(ValueError):
    """A binary or JSON file does not parse."""
