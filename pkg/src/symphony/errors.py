"""Exception hierarchy shared across the package."""


class SymphonyError(Exception):
    """Base class for all package errors."""


class NumericalError(SymphonyError):
    """Raised when a linear-algebra or optimisation step cannot proceed."""


class NotPositiveDefinite(NumericalError):
    pass


class JitterBudgetExceeded(NotPositiveDefinite):
    pass


class DofTooSmall(NumericalError, ValueError):
    pass


class DomainError(SymphonyError, ValueError):
    pass


class DataError(SymphonyError):
    """Problems with user supplied files or matrices."""


class ParseError(DataError):
    def __init__(self, message, path=None, line=None, column=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.column = column


class DimensionMismatch(DataError, ValueError):
    pass


class DuplicateLabel(DataError, ValueError):
    pass


class MappingMissing(DataError, ValueError):
    pass


class UnknownRegion(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class LengthMismatch(SymphonyError, ValueError):
    pass


class ShapeMismatch(SymphonyError, ValueError):
    pass


class SchemaVersionError(DataError):
    pass
