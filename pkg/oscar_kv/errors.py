"""
Exception hierarchy shared by every oscar_kv module.
"""


class OscarError(Exception):
    """Base class for all library errors."""


class DimensionError(OscarError, ValueError):
    """A shape or size does not satisfy an operation's precondition."""


class InputError(OscarError, ValueError):
    """Input values are malformed (non-finite, asymmetric, out of range)."""


class EmptyDumpError(InputError):
    """An activation dump or slice carries no tokens."""


class NumericalError(OscarError, ValueError):
    """A computation cannot be carried out, e.g. a fully masked softmax row."""


class ConvergenceError(OscarError, RuntimeError):
    """An iterative solver hit its iteration cap."""


class FormatError(OscarError, ValueError):
    """A tensor container or packed row is corrupt."""
