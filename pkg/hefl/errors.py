"""Exception hierarchy shared by every hefl module."""


class HeflError(Exception):
    """Base class for all errors raised by hefl."""


class ConfigError(HeflError, ValueError):
    """The experiment configuration is invalid or incomplete."""


class ModelSpecError(HeflError, ValueError):
    """Layer shapes of a model spec do not compose."""


class ShapeError(HeflError, ValueError):
    """A tensor or parameter vector has the wrong shape or length."""


class LabelError(HeflError, ValueError):
    """A label lies outside the model's class range."""


class EmptyDatasetError(HeflError, ValueError):
    pass


class DataFormatError(HeflError, ValueError):
    """A dataset file is truncated or holds out-of-range values."""


class PartitionError(HeflError):
    """No valid client partition could be produced."""


class CryptoError(HeflError):
    pass


class KeyMismatchError(CryptoError):
    """A ciphertext was produced under a different key."""


class MaskMismatchError(CryptoError):
    """Two masked models (or a model and a mask) disagree on the encryption mask."""


class FixedPointOverflowError(CryptoError):
    """A value does not fit in the plaintext space at the configured precision."""


class AggregationError(HeflError):
    pass


class AttackError(HeflError, ValueError):
    pass


class ReportError(HeflError):
    pass


class ArtifactError(HeflError):
    """Run artifacts are missing, unreadable or would be overwritten."""
