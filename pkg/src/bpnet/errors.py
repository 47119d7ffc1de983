"""Exception hierarchy. Every library error derives from BPNetError."""


class BPNetError(Exception):
    pass


class ShapeError(BPNetError, ValueError):
    pass


class ParameterError(BPNetError, ValueError):
    pass


class UsageError(BPNetError, RuntimeError):
    """Operation called out of order, e.g. backward before forward."""


class NumericError(BPNetError, ArithmeticError):
    pass


class BuildError(BPNetError, ValueError):
    pass


class ConfigError(BPNetError, ValueError):
    pass


class DataError(BPNetError, ValueError):
    pass


class FormatError(BPNetError, ValueError):
    """Malformed binary file (model file, IDX, CIFAR-10 batch)."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset
