"""Exception hierarchy.

Each class carries a ``code`` used as the process exit status by the CLI, so
that scripted callers can tell failure classes apart.
"""


class FusionSegError(Exception):
    code = 1


class DataIntegrityError(FusionSegError, ValueError):
    """Non-finite values, non-binary masks, shape mismatches between modalities."""

    code = 3


class ConfigError(FusionSegError, ValueError):
    code = 2


class EmptyStructureError(FusionSegError, ValueError):
    """Surface-distance metric requested on an empty mask."""

    code = 4


class VolumeReadError(FusionSegError):
    code = 10


class MissingFileError(VolumeReadError, FileNotFoundError):
    code = 11


class MalformedHeaderError(VolumeReadError):
    code = 12


class NotThreeDError(VolumeReadError):
    code = 13


class InvalidSpacingError(VolumeReadError):
    code = 14


class VolumeWriteError(FusionSegError, OSError):
    code = 15


class TrainingDivergedError(FusionSegError, FloatingPointError):
    code = 20


class DegenerateInputWarning(UserWarning):
    """A constant volume was normalized to all zeros."""
