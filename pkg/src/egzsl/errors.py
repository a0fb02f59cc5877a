"""Exception types shared across the package."""


class EGZSLError(Exception):
    pass


class ShapeError(EGZSLError, ValueError):
    """Operand dimensions do not line up."""


class NumericError(EGZSLError, ArithmeticError):
    """A non-finite value reached an operation that refuses it."""


class ProtocolViolation(EGZSLError):
    """Data flow broke the streaming evaluation contract (e.g. unseen labels in the base set)."""


class FormatError(EGZSLError, ValueError):
    """A bundle or checkpoint on disk is malformed.

    ``field`` names the offending key when one can be pinned down.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
