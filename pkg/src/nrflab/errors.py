"""Exception types raised across nrflab.

Each error also derives from the closest builtin, so callers that only care about
``ValueError`` (or ``ArithmeticError``) keep working.
"""


class NrfLabError(Exception):
    """Base class for every error raised by nrflab."""


class ShapeError(NrfLabError, ValueError):
    pass


class DegenerateFanError(NrfLabError, ValueError):
    pass


class UnknownPresetError(NrfLabError, ValueError):
    pass


class IncompatibleOverridesError(NrfLabError, ValueError):
    pass


class HeadDimensionError(NrfLabError, ValueError):
    pass


class NumericOverflowError(NrfLabError, ArithmeticError):
    """A forward pass produced a non-finite value.

    ``layer`` names the layer where it first appeared; ``example`` and ``seed`` are filled in
    by callers that know the dataset row and network stream.
    """

    def __init__(
        self,
        message: str,
        *,
        layer: str | None = None,
        example: int | None = None,
        seed: tuple[int, int] | None = None,
    ):
        super().__init__(message)
        self.layer = layer
        self.example = example
        self.seed = seed


class UndefinedAngleError(NrfLabError, ValueError):
    pass


class UndefinedCosineError(NrfLabError, ValueError):
    def __init__(self, message: str, *, class_index: int):
        super().__init__(message)
        self.class_index = class_index


class DimensionMismatchError(NrfLabError, ValueError):
    pass


class CorruptFileError(NrfLabError, ValueError):
    def __init__(self, message: str, *, expected: int | None = None, actual: int | None = None):
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class FormatError(NrfLabError, ValueError):
    pass


class InsufficientExamplesError(NrfLabError, ValueError):
    pass


class CorruptCacheError(NrfLabError, ValueError):
    pass


class StaleCacheError(NrfLabError, ValueError):
    pass


class ConfigError(NrfLabError, ValueError):
    pass
