"""Exception types shared across the package."""


class GSNetError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(GSNetError, ValueError):
    """A caller-supplied argument violates an operation's precondition."""


class ParseError(GSNetError, ValueError):
    """A point-cloud or manifest file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class InvalidDataError(GSNetError, ValueError):
    """Input parsed fine but is semantically unusable (e.g. empty cloud)."""


class TrainingDivergenceError(GSNetError, ArithmeticError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")


class ContractViolationError(GSNetError, RuntimeError):
    """An internal contract (e.g. forward determinism) was broken."""
