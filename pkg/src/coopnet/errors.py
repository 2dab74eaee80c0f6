"""Exception types raised across the package."""


class CoopNetError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(CoopNetError, ValueError):
    pass


class DimensionMismatch(CoopNetError, ValueError):
    pass


class EmptyCandidateList(CoopNetError, ValueError):
    pass


class NonFiniteSample(CoopNetError, ValueError):
    pass


class InsufficientObservations(CoopNetError, RuntimeError):
    pass


class DegenerateSplit(CoopNetError, RuntimeError):
    """Either the tail set or its complement is empty."""


class EmptyMask(CoopNetError, RuntimeError):
    pass


class EmptyValidSet(CoopNetError, RuntimeError):
    pass


class NonFiniteLoss(CoopNetError, FloatingPointError):
    pass


class DivergedLoss(CoopNetError, FloatingPointError):
    """Training produced a non-finite loss. ``trace`` holds the rows so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class EmptyFrustum(CoopNetError, ValueError):
    pass
