"""Exception hierarchy shared across the package."""


class CovlocError(Exception):
    """Base class for every error raised by covloc."""


class DomainError(CovlocError, ValueError):
    """An argument lies outside the domain of the operation."""


class FactorizationError(CovlocError, ArithmeticError):
    """A covariance could not be Cholesky-factored, even after jitter."""


class NumericalError(CovlocError, ArithmeticError):
    """A linear solve failed; ``condition`` carries a condition-number estimate."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class DegenerateGeometryError(CovlocError, ArithmeticError):
    """A DI01 trace denominator is non-positive or an indicator is unusable.

    When raised during iterative tuning the partial trace is attached as
    ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class StrategyError(CovlocError):
    """A cluster cannot be tuned under the chosen observation strategy."""

    def __init__(self, message, cluster=None):
        super().__init__(message)
        self.cluster = cluster


class FormatError(CovlocError, ValueError):
    """An input file is unreadable or ill-formed."""

    def __init__(self, message, path=None, line=None, column=None):
        where = ""
        if path is not None:
            where = str(path)
            if line is not None:
                where += f":{line}"
                if column is not None:
                    where += f":{column}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line
        self.column = column
