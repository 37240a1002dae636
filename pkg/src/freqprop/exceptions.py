"""Exception hierarchy shared across the package."""


class FreqPropError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(FreqPropError, ValueError):
    pass


class SymmetryViolation(FreqPropError, ValueError):
    """A spectrum expected to come from a real feature is not conjugate symmetric."""


class ZeroVector(FreqPropError, ValueError):
    pass


class KernelTooLarge(FreqPropError, ValueError):
    pass


class SizeRegimeUnsupported(FreqPropError, ValueError):
    pass


class RegimeViolation(FreqPropError, ValueError):
    """A layer breaks the circular-padding, stride-1 regime."""


class UpsamplePresent(RegimeViolation):
    """An upsampling layer sits inside a span that must be conv-only."""

    def __init__(self, position):
        self.position = position
        super().__init__(f"upsampling layer at position {position}; split the network there")


class SpecMismatch(FreqPropError, ValueError):
    pass


class InsufficientSamples(FreqPropError, ValueError):
    pass


class DegenerateLayer(FreqPropError, ValueError):
    pass


class ZeroEnergy(FreqPropError, ValueError):
    pass


class SizeTooSmall(FreqPropError, ValueError):
    pass


class ConfigError(FreqPropError):
    pass


class IoError(FreqPropError, OSError):
    """Reading or writing an artifact file failed."""
