"""Exception hierarchy shared by all modules."""


class SpnSeqError(Exception):
    """Base class for library errors."""


class StructureError(SpnSeqError, ValueError):
    """A topology, prefix or state encoding is invalid."""


class InputError(SpnSeqError, ValueError):
    """Observations, labels or configuration values are malformed."""


class NumericError(SpnSeqError, ArithmeticError):
    """A weight, input or intermediate value is not finite."""


class ContractError(SpnSeqError, RuntimeError):
    """An operation was called outside its documented preconditions."""


class ParseError(InputError):
    """A data file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class BudgetExceeded(SpnSeqError, RuntimeError):
    """An exhaustive oracle was asked to enumerate more than its cap."""
