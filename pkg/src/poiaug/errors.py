"""Exception hierarchy shared across the package."""


class PoiAugError(Exception):
    """Base class for all package errors."""


class ShapeError(PoiAugError, ValueError):
    """Array dimensions disagree with a parameter's declared shape."""


class ContractViolation(PoiAugError, RuntimeError):
    """A documented precondition of an operation was not met."""


class DataFormatError(PoiAugError, ValueError):
    """Input data does not look like the expected file layout."""


class NumericalError(PoiAugError, ArithmeticError):
    """A non-finite value appeared where a finite one is required.

    ``store`` optionally carries the last finite parameters so callers can
    persist them before aborting.
    """

    def __init__(self, message, store=None):
        super().__init__(message)
        self.store = store


class UndefinedMetricError(PoiAugError, ValueError):
    """A metric was requested over an empty set of cases."""
