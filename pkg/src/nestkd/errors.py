"""Exception types raised across the package."""


class NestKDError(Exception):
    """Base class for all package errors."""


class ConfigError(NestKDError, ValueError):
    pass


class ShapeError(NestKDError, ValueError):
    pass


class EmptyDataset(NestKDError):
    pass


class InsufficientTiles(NestKDError):
    pass


class InvalidSize(NestKDError, ValueError):
    pass


class InvalidCrop(NestKDError, ValueError):
    pass


class TeacherUnavailable(NestKDError):
    pass


class MissingEMA(NestKDError):
    pass


class MissingHeads(NestKDError):
    pass


class InvalidK(NestKDError, ValueError):
    pass


class InvalidDim(NestKDError, ValueError):
    pass


class DegenerateLabels(NestKDError, ValueError):
    pass


class NonFiniteLoss(NestKDError, FloatingPointError):
    """Raised when a training step produces a NaN/inf loss.

    ``breakdown`` holds the per-(teacher, level) terms of the failing step.
    """

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = dict(breakdown or {})
