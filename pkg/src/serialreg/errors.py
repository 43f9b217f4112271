"""Exception types raised across the registration pipeline."""

from __future__ import annotations


class RegistrationError(Exception):
    """Base class for every error raised by serialreg."""


class SingularTransform(RegistrationError, ValueError):
    pass


class InsufficientPoints(RegistrationError, ValueError):
    pass


class DegenerateConfiguration(RegistrationError, ValueError):
    pass


class DescriptorLengthMismatch(RegistrationError, ValueError):
    pass


class InsufficientMatches(RegistrationError):
    pass


class NoConsensus(RegistrationError):
    """RANSAC found too few inliers; ``hypothesis`` is its best transform, if any."""

    def __init__(self, message: str, best_inliers: int = 0, hypothesis=None):
        super().__init__(message)
        self.best_inliers = best_inliers
        self.hypothesis = hypothesis


class Stage1Failure(RegistrationError):
    """Keypoint stage could not produce a transform.

    ``diagnostics`` holds keypoint counts, match count and the best inlier
    count seen, so callers can log why the pair failed.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ShapeMismatch(RegistrationError, ValueError):
    pass


class EmptyOverlap(RegistrationError, ValueError):
    pass


class DegenerateVariance(RegistrationError, ValueError):
    pass


class EmptySeries(RegistrationError, ValueError):
    pass


class PairRegistrationFailure(RegistrationError):
    pass


class NoMiddleAnnotation(RegistrationError):
    pass


class ParseError(RegistrationError, ValueError):
    pass


class MissingImage(RegistrationError, FileNotFoundError):
    pass


class DecodeError(RegistrationError, ValueError):
    pass


class WriteError(RegistrationError, OSError):
    pass
