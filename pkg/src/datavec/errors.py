"""Domain error types shared across the toolkit.

Every error the library raises on purpose derives from DataVecError, so
callers (and the CLI) can distinguish domain failures from bugs.
"""


class DataVecError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ShapeMismatch(DataVecError):
    """Tensor sets disagree on names, kinds, or shapes."""


class IoFailure(DataVecError):
    """Underlying filesystem operation failed."""


class CorruptFile(DataVecError):
    """Checkpoint file is malformed (bad magic, bad header, truncation...)."""


class VersionUnsupported(DataVecError):
    """Checkpoint declares a format version this build cannot read."""


class LabelOutOfRange(DataVecError):
    """A class label falls outside [0, num_classes)."""


class StaleCache(DataVecError):
    """Backward pass received a cache that does not match the given state."""


class EmptyDataset(DataVecError):
    """An operation that needs samples received none."""


class BaseMismatch(DataVecError):
    """Data vectors were computed against different pre-trained bases."""


class MissingBase(DataVecError):
    """A data vector has no usable base checkpoint hash."""


class EmptyList(DataVecError):
    """An aggregate operation received an empty list of inputs."""


class PartsExceedSamples(DataVecError):
    """Requested more split parts than there are samples."""


class ParseError(DataVecError):
    """Text input (CSV, config) could not be parsed; message names the spot."""


class BadMagic(DataVecError):
    """IDX file does not start with the expected magic number."""


class LengthMismatch(DataVecError):
    """IDX image and label files disagree on sample count or payload size."""


class IncompleteReport(DataVecError):
    """Report lacks the values needed to emit a table."""
