"""Exception types raised across the library."""


class AsconvError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(AsconvError):
    pass


class NonFinite(AsconvError):
    """A tensor holds (or an operation produced) NaN or Inf."""


class InvalidAxis(AsconvError):
    pass


class NotScalar(AsconvError):
    pass


class NonSquareRotation(AsconvError):
    """Quarter-turn rotation requested on a non-square spatial grid."""


class KernelLargerThanPaddedInput(AsconvError):
    pass


class OddSpatialDim(AsconvError):
    pass


class BatchTooSmall(AsconvError):
    pass


class HeadDivisibility(AsconvError):
    pass


class UnknownVariant(AsconvError):
    pass


class InvalidConfig(AsconvError):
    pass


class FileTruncated(AsconvError):
    pass


class LabelOutOfRange(AsconvError):
    pass


class EmptyDataset(AsconvError):
    pass


class UnknownTarget(AsconvError):
    pass
