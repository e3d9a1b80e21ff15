"""Exception hierarchy shared by all modules."""


class HolsteinLabError(Exception):
    """Base class for every error raised by the package."""


class SiteOutsideRegion(HolsteinLabError, ValueError):
    pass


class SubsetOutsideRegion(HolsteinLabError, ValueError):
    pass


class Unreachable(HolsteinLabError):
    """Two sites lie in different connected components of a region."""


class EmptyRegion(HolsteinLabError, ValueError):
    pass


class TruncationNotConverged(HolsteinLabError, RuntimeError):
    pass


class BasisTooLarge(HolsteinLabError, RuntimeError):
    pass


class TooManyWaypoints(HolsteinLabError, ValueError):
    pass


class SelectorMismatch(HolsteinLabError, ValueError):
    pass


class DimensionTooLarge(HolsteinLabError, RuntimeError):
    pass


class SingularShift(HolsteinLabError, ArithmeticError):
    pass


class SolveNotConverged(HolsteinLabError, ArithmeticError):
    pass


class GapViolated(HolsteinLabError, ValueError):
    pass


class InsufficientDistances(HolsteinLabError, ValueError):
    pass


class NonpositiveMean(HolsteinLabError, ValueError):
    pass


class ConfigInvalid(HolsteinLabError, ValueError):
    """Raised with a list of field-level messages."""

    def __init__(self, messages):
        if isinstance(messages, str):
            messages = [messages]
        self.messages = list(messages)
        super().__init__("; ".join(self.messages))


class ComputeFailed(HolsteinLabError, RuntimeError):
    pass
