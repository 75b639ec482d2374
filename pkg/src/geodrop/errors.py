"""Exception hierarchy shared across geodrop."""


class GeodropError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GeodropError, ValueError):
    pass


class DomainError(GeodropError, ValueError):
    pass


class NumericalError(GeodropError, ArithmeticError):
    """A computation produced non-finite values or failed to converge.

    ``state`` optionally carries the last finite iterate (e.g. parameters
    before an SGD step blew up).
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class SingularMetricError(NumericalError):
    pass


class DegenerateChartError(NumericalError):
    pass


class EmptyMaskError(GeodropError, ValueError):
    pass


class DegenerateMaskError(GeodropError, ValueError):
    pass


class UnsupportedError(GeodropError, ValueError):
    pass


class CapacityError(GeodropError, ValueError):
    pass


class FormatError(GeodropError, ValueError):
    pass
