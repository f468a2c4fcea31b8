"""Exception types raised across the package."""


class SplatError(Exception):
    """Base class for all package errors."""


class BehindCamera(SplatError):
    """A point lies at or behind the near plane of a camera."""


class NonPositiveDepth(SplatError):
    pass


class ShapeMismatch(SplatError, ValueError):
    pass


class WindowLengthMismatch(SplatError, ValueError):
    pass


class EmptyRecipe(SplatError, ValueError):
    pass


class SingularJacobian(SplatError):
    pass


class SingularInnovation(SplatError):
    pass


class NonFiniteLoss(SplatError, FloatingPointError):
    """Training produced a NaN/inf loss.

    ``gaussian_index`` names the first Gaussian with a non-finite attribute,
    or is ``None`` when every attribute is finite (the field is then the culprit).
    """

    def __init__(self, message, gaussian_index=None, pixel=None):
        super().__init__(message)
        self.gaussian_index = gaussian_index
        self.pixel = pixel


class DataError(SplatError):
    """Malformed or missing input file."""


class NonContractive(UserWarning):
    """Fixed-point inversion of the deformation did not shrink its residual."""
