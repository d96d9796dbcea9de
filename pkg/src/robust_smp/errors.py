"""Exception hierarchy shared by every module of the toolkit."""


class RobustSMPError(Exception):
    """Base class for all toolkit errors."""


class BadSpec(RobustSMPError, ValueError):
    """A specification object violates one of its invariants."""


class TreeTooLarge(RobustSMPError):
    pass


class StageOutOfRange(RobustSMPError, IndexError):
    pass


class ShapeMismatch(RobustSMPError, ValueError):
    pass


class InadmissibleControl(RobustSMPError, ValueError):
    """A control value lies outside the control set at some node."""


class InadmissiblePerturbation(InadmissibleControl):
    pass


class EmptyAmbiguitySet(RobustSMPError, ValueError):
    pass


class EmptyActiveSet(RobustSMPError):
    pass


class MeasureNotInSet(RobustSMPError, ValueError):
    pass


class UnsupportedFamily(RobustSMPError, TypeError):
    """Convexity cannot be decided for a generic coefficient evaluator."""


class SingularWeight(RobustSMPError, ArithmeticError):
    pass


class BisectionStalled(RobustSMPError):
    pass


class GridTooLarge(RobustSMPError):
    pass


class ParseError(RobustSMPError):
    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column


class ValidationError(RobustSMPError, ValueError):
    """Aggregated configuration errors; ``errors`` holds every message found."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
