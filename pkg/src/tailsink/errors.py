"""Exception types raised across the package."""


class InfeasibleSupport(ValueError):
    """An active row or column has no active edge."""


class InvalidTemperature(ValueError):
    pass


class UnsupportedDepth(ValueError):
    pass


class MissingBaseTrace(ValueError):
    pass


class NotApplicable(ValueError):
    """Certificate precondition (strict positivity) does not hold."""


class StageMismatch(ValueError):
    pass


class SizeCapExceeded(ValueError):
    pass


class UndefinedRatio(ValueError):
    pass
