"""Exception types shared across the package.

Every error raised on a documented failure path derives from UcdmtError so
the CLI can map library failures to exit codes without enumerating modules.
"""


class UcdmtError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(UcdmtError):
    """Arrays that must agree in shape do not."""


class InvalidCode(UcdmtError):
    """A modality code is not a valid one-hot vector."""


class MissingModality(UcdmtError):
    """A subject lacks one of the M required modality files."""


class MissingSubject(UcdmtError):
    """A requested subject id is not present in the manifest."""


class IndivisibleBatch(UcdmtError):
    """Batch size is not divisible by the number of modalities."""


class IoFailure(UcdmtError):
    """File could not be written or read back consistently."""


class CorruptCheckpoint(UcdmtError):
    """Checkpoint file failed magic/length validation."""


class ConfigError(UcdmtError):
    """Training configuration is malformed; message carries the key path."""


class NonFiniteLoss(UcdmtError):
    """A training loss went NaN/Inf; training aborts rather than continue."""


class EmptySet(UcdmtError):
    """A metric was asked to aggregate over zero samples."""


class InvalidDistribution(UcdmtError):
    """A classifier emitted rows that are not probability vectors."""


class ImageTooSmall(UcdmtError):
    """Image is smaller than the metric's sliding window."""
