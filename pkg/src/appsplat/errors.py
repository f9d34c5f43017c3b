"""Exception types raised across the package."""


class AppsplatError(Exception):
    """Base class for all package errors."""


class InvalidSpec(AppsplatError, ValueError):
    pass


class BehindCamera(AppsplatError, ValueError):
    pass


class DegenerateCovariance(AppsplatError, ArithmeticError):
    pass


class ShapeMismatch(AppsplatError, ValueError):
    pass


class WidthMismatch(ShapeMismatch):
    pass


class SizeMismatch(ShapeMismatch):
    pass


class StaleCache(AppsplatError, RuntimeError):
    pass


class EmptyCameraSet(AppsplatError, ValueError):
    pass


class EmptyBuffer(AppsplatError, LookupError):
    pass


class EmptyDataset(AppsplatError, ValueError):
    pass


class AlphaBarOne(AppsplatError, ValueError):
    pass


class MissingTerm(AppsplatError, KeyError):
    pass


class NonFiniteLoss(AppsplatError, FloatingPointError):
    pass


class TooSmall(AppsplatError, ValueError):
    pass


class SpecHashMismatch(AppsplatError, ValueError):
    pass


class ConfigError(AppsplatError, ValueError):
    pass
