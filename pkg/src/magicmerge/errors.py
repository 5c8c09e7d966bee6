"""Exception and warning types raised across the package."""


class MagicError(Exception):
    """Base class for every error raised by magicmerge."""


class ShapeMismatch(MagicError, ValueError):
    pass


class ZeroAxis(MagicError, ValueError):
    pass


class MalformedHeader(MagicError, ValueError):
    pass


class OffsetOverlap(MagicError, ValueError):
    pass


class UnsupportedDtype(MagicError, ValueError):
    pass


class IoFailure(MagicError, OSError):
    pass


class DimensionMismatch(MagicError, ValueError):
    pass


class UnknownActivation(MagicError, ValueError):
    pass


class MissingTensor(MagicError, KeyError):
    pass


class MissingLabels(MagicError, ValueError):
    pass


class DivergedLoss(MagicError, FloatingPointError):
    pass


class BaseMismatch(MagicError, ValueError):
    """Task vectors built against different pretrained weights were combined."""


class EmptyInput(MagicError, ValueError):
    pass


class DegenerateInput(MagicError, ValueError):
    pass


class UnknownKey(MagicError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class OutOfRange(MagicError, ValueError):
    pass


class MissingRequired(MagicError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DegenerateFeature(UserWarning):
    """A layer's merged task feature is numerically zero; the layer is left uncalibrated."""


class ZeroMerged(UserWarning):
    """A merged task-vector layer is zero, so no weight-space coefficient exists."""
