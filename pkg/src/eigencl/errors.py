"""Exception types shared across the package."""


class EigenCLError(Exception):
    """Base class for all package errors."""


class DomainError(EigenCLError, ValueError):
    pass


class FormatError(EigenCLError, ValueError):
    pass


class ParseError(EigenCLError, ValueError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ParameterError(EigenCLError, ValueError):
    pass


class ConfigError(EigenCLError, ValueError):
    pass


class ContractError(EigenCLError, ValueError):
    """A documented precondition of an operation was violated by the caller."""


class NumericalError(EigenCLError, ArithmeticError):
    pass


class MetricUndefinedError(ContractError):
    pass
