"""Exception types raised across the package."""


class DCGPError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(DCGPError):
    pass


class DimensionMismatch(DCGPError, ValueError):
    pass


class PatchTooLarge(DCGPError, ValueError):
    pass


class NegativeVariance(DCGPError, ValueError):
    pass


class LabelOutOfRange(DCGPError, ValueError):
    pass


class NonFiniteGradient(DCGPError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in tensor {name!r}")
        self.name = name


class InsufficientPatches(DCGPError, ValueError):
    pass


class ShapeMismatch(DCGPError, ValueError):
    pass


class SingularMatrix(DCGPError):
    pass


class BadMagic(DCGPError, ValueError):
    pass


class TruncatedFile(DCGPError, ValueError):
    pass


class CountMismatch(DCGPError, ValueError):
    pass


class ZeroVariance(DCGPError, ValueError):
    pass


class CheckpointError(DCGPError, ValueError):
    pass
