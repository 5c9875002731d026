"""Exception hierarchy shared by every module."""


class DenseGroundError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(DenseGroundError, ValueError):
    pass


class EmptyReduction(DenseGroundError, ValueError):
    pass


class NonScalarRoot(DenseGroundError, ValueError):
    pass


class InvalidConfig(DenseGroundError, ValueError):
    pass


class EmptyWindow(DenseGroundError, ValueError):
    pass


class NonFiniteScores(DenseGroundError, FloatingPointError):
    pass


class NonPositiveGamma(DenseGroundError, ValueError):
    pass


class NonFiniteLoss(DenseGroundError, FloatingPointError):
    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)


class PlacementFailure(DenseGroundError, RuntimeError):
    pass


class OutOfBounds(DenseGroundError, IndexError):
    pass


class CorruptFile(DenseGroundError, IOError):
    pass


class InvariantViolation(DenseGroundError, ValueError):
    pass


class InsufficientSamples(DenseGroundError, ValueError):
    pass


class NoPositives(DenseGroundError, ValueError):
    pass


class MissingRegime(DenseGroundError, ValueError):
    pass
