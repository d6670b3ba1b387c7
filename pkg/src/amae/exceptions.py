"""Exception hierarchy shared by every stage of the pipeline."""


class AMAEError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(AMAEError, ValueError):
    pass


class EmptyMask(AMAEError, ValueError):
    pass


class InvalidSchedule(AMAEError, ValueError):
    pass


class IndexOutOfRange(AMAEError, IndexError):
    pass


class InvalidRatio(AMAEError, ValueError):
    pass


class InfeasibleSet(AMAEError, ValueError):
    pass


class InvalidAR(AMAEError, ValueError):
    pass


class ManifestParseError(AMAEError, ValueError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class SegmentationEmpty(AMAEError, RuntimeError):
    pass


class RegionTooSmall(AMAEError, RuntimeError):
    pass


class EmptyDataset(AMAEError, ValueError):
    pass


class InsufficientPseudoAbnormal(AMAEError, RuntimeError):
    """No unlabeled image survived pseudo-labeling as abnormal.

    Module B cannot be trained; callers may fall back to Stage-1 scoring.
    """


class DegenerateLabels(AMAEError, ValueError):
    pass


class DegenerateRange(AMAEError, ValueError):
    pass


class DegenerateVariance(AMAEError, ValueError):
    pass


class EmptySelection(AMAEError, ValueError):
    pass


class MissingSidecar(AMAEError, FileNotFoundError):
    pass


class CheckpointError(AMAEError, IOError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ConfigMismatch(CheckpointError):
    pass
