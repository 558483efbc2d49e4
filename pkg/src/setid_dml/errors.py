"""Exception types raised across the package."""


class SetIdError(Exception):
    """Base class for package errors."""


class InvalidArgument(SetIdError, ValueError):
    pass


class ValidationError(SetIdError, ValueError):
    """A dataset row violates the model's data contract."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class SchemaError(SetIdError, ValueError):
    """Malformed CSV input; carries the 1-based file line number."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ConvergenceError(SetIdError, RuntimeError):
    def __init__(self, message, iterations):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class MissingCellError(SetIdError, KeyError):
    def __init__(self, key):
        super().__init__(f"no training observations in quantile cell {key!r}")
        self.key = key


class UnsupportedError(SetIdError, NotImplementedError):
    pass


class IncompleteProfileError(SetIdError, KeyError):
    pass


class DegenerateError(SetIdError, ArithmeticError):
    """Numerical degeneracy: singular design, empty cell, probability floor breach."""

    def __init__(self, message, rows=None):
        super().__init__(message)
        self.rows = rows


class ProjectionSetError(DegenerateError):
    pass


class FoldError(SetIdError, RuntimeError):
    """A learner failed inside a cross-fitting fold."""

    def __init__(self, fold, component, cause):
        super().__init__(f"fold {fold}, component {component!r}: {cause}")
        self.fold = fold
        self.component = component
        self.cause = cause
