"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so commands fail with a stable
category instead of a raw traceback class name.
"""


class VoxmaeError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(VoxmaeError):
    """Invalid configuration value or config file."""

    exit_code = 2


class DataError(VoxmaeError):
    """Dataset, manifest, or sample-level problem."""

    exit_code = 3


class VolumeFormatError(VoxmaeError):
    """Corrupt or truncated volume file."""

    exit_code = 3


class CheckpointError(VoxmaeError):
    """Checkpoint missing, version-mismatched, or shape-incompatible."""

    exit_code = 4


class TrainingDivergedError(VoxmaeError):
    """Loss became non-finite during training."""

    exit_code = 5
