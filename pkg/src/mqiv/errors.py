"""Exception hierarchy. CLI exit codes are keyed off these classes."""


class MqivError(Exception):
    """Base class for all package errors."""


class DataError(MqivError, ValueError):
    """Malformed input data: missing columns, non-binary indicators, non-finite values."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class NuisanceError(MqivError):
    """A nuisance regression could not be fit (e.g. an empty training cell)."""

    def __init__(self, message, cell=None, fold=None):
        super().__init__(message)
        self.cell = cell
        self.fold = fold


class EstimationError(MqivError):
    """An estimator could not be evaluated (no treated units, empty fold, ...)."""
