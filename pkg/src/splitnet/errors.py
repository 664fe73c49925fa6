"""Exception hierarchy shared by every splitnet module."""


class SplitNetError(Exception):
    """Base class for all library errors."""


class ValidationError(SplitNetError, ValueError):
    """Input violates a documented invariant or precondition."""


class UnsupportedFamilyError(ValidationError):
    pass


class UnsupportedPresetError(ValidationError):
    pass


class StateError(SplitNetError, RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class DivergenceError(SplitNetError, RuntimeError):
    """Training produced a non-finite loss."""


class InternalError(SplitNetError, RuntimeError):
    """A library invariant broke; indicates a bug rather than bad input."""
