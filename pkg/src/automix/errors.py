"""Typed error hierarchy shared by every module."""


class AutomixError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AutomixError):
    """Shapes are incompatible for the requested operation."""


class ParameterError(AutomixError):
    """An argument is outside its documented domain."""


class ContractError(AutomixError):
    """A caller violated an API contract (non-scalar loss, malformed one-hot, ...)."""


class NumericError(AutomixError):
    """A numeric invariant failed at runtime (NaN input, diverging loss)."""


class FormatError(AutomixError):
    """A binary container is structurally malformed."""


class LengthError(FormatError):
    """A binary container is truncated or its payload size disagrees with its header."""


class DatasetError(AutomixError):
    """A dataset violates its invariants (empty, labels out of range)."""
