"""Exception types raised across the package."""


class BanditError(Exception):
    """Base class for all package errors."""


class InputShapeError(BanditError, ValueError):
    pass


class NumericOverflowError(BanditError, ArithmeticError):
    pass


class InvalidActionError(BanditError, ValueError):
    pass


class InvalidRateError(BanditError, ValueError):
    pass


class InvalidPriorError(BanditError, ValueError):
    pass


class LayoutMismatchError(BanditError, ValueError):
    pass


class NonPositiveDefiniteError(BanditError, ValueError):
    """Precision matrix failed a Cholesky factorization."""


class DatasetParseError(BanditError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class HorizonError(BanditError, IndexError):
    """Environment ran out of examples for the requested step."""


class ConfigError(BanditError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
