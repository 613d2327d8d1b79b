"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code taxonomy: configuration problems
exit 1, data problems exit 2, numeric failures exit 3.
"""


class CribtagError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CribtagError):
    """Invalid configuration: bad field values, incompatible model/checkpoint
    shapes, missing required settings."""


class DataError(CribtagError):
    """Problems with input data: unreadable files, malformed manifests,
    out-of-range intervals, degenerate datasets."""


class AudioFormatError(DataError):
    """Audio file is not a container/codec this package decodes."""


class ManifestError(DataError):
    """A manifest file or one of its records failed validation."""


class CheckpointError(DataError):
    """A checkpoint file is corrupted, truncated, or structurally invalid."""


class DimensionError(CribtagError):
    """Tensor shapes do not satisfy an operation's contract."""


class ContractError(CribtagError):
    """An API precondition was violated by the caller."""


class NumericError(CribtagError):
    """Numeric computation failed: non-finite values, divergence."""


class TrainingDiverged(NumericError):
    """Training produced a non-finite loss."""
