"""Exception types shared across the package."""


class BtdnetError(Exception):
    """Base class for every error this package raises on purpose."""


class ConfigError(BtdnetError):
    """Malformed or unknown configuration key/value."""


class MissingModality(BtdnetError):
    """A scan directory lacks one of the four required modalities."""


class CorruptSlice(BtdnetError):
    """A slice image could not be read or has an unexpected layout."""


class ManifestMismatch(BtdnetError):
    """On-disk slice counts disagree with the manifest."""


class EmptyVolume(BtdnetError):
    """Slice filtering removed every slice of a volume."""


class DegenerateRegion(BtdnetError):
    """Crop box has zero width or height."""


class VolumeTooLong(BtdnetError):
    """Volume has more real slices than the configured padded length."""


class ShapeMismatch(BtdnetError):
    """Array/tensor shapes violate an operation's contract."""


class InvalidParameter(BtdnetError):
    """Numeric parameter outside its valid range."""


class InvalidLength(BtdnetError):
    """True length outside [1, padded length]."""


class NonFiniteInput(BtdnetError):
    """NaN or infinity in a loss input."""


class InsufficientClass(BtdnetError):
    """A class has fewer members than the number of folds."""


class EmptyFold(BtdnetError):
    """A training or validation fold contains no scans."""


class CheckpointMismatch(BtdnetError):
    """Checkpoint missing, wrong version, or incompatible with the model."""


class EmptyInput(BtdnetError):
    """An aggregation received an empty collection."""


class IoError(BtdnetError):
    """Filesystem write failed (unwritable path, disk error)."""
