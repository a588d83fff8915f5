"""Exception hierarchy shared by every module."""


class RCoNetError(Exception):
    """Base class for all library errors."""


class DimensionError(RCoNetError, ValueError):
    pass


class DomainError(RCoNetError, ValueError):
    pass


class ContractError(RCoNetError, ValueError):
    pass


class NumericError(RCoNetError, ArithmeticError):
    pass


class SamplingError(RCoNetError, ValueError):
    pass


class ConstraintError(RCoNetError, ValueError):
    pass


class FormatError(RCoNetError, ValueError):
    """Malformed binary file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericWarning(RuntimeWarning):
    pass
