"""Exception types shared across the package."""


class KptransferError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateControlPoints(KptransferError):
    """The TPS system matrix is singular (colinear or duplicate controls)."""


class LengthMismatch(KptransferError, ValueError):
    pass


class EmptyImage(KptransferError, ValueError):
    pass


class InsufficientKeypoints(KptransferError):
    """No pose variant has all of its required keypoints visible."""


class NoCompatibleCandidates(KptransferError):
    def __init__(self, message, animal_ids=()):
        super().__init__(message)
        self.animal_ids = list(animal_ids)


class ParseError(KptransferError):
    pass


class ValidationError(KptransferError):
    def __init__(self, message, ids=()):
        super().__init__(message)
        self.ids = list(ids)


class EmptyIntersection(KptransferError):
    pass


class InvalidRotation(KptransferError, ValueError):
    pass


class InsufficientCorrespondences(KptransferError):
    pass


class GridMismatch(KptransferError, ValueError):
    pass


class NonFiniteGradient(KptransferError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
