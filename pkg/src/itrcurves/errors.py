class DomainError(ValueError):
    """An argument lies outside the support of the quantity it parameterizes."""


class NumericalError(ArithmeticError):
    """A covariance could not be factorized even after jitter."""


class ParseError(ValueError):
    """A data or configuration file is malformed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
