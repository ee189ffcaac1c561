"""Exception types shared across the package.

Every error carries a short ``category`` string; the command-line front end
prints it as the first field of its one-line error report.
"""


class ChunkCNNError(Exception):
    category = "error"


class FormatError(ChunkCNNError, ValueError):
    category = "format"


class UnsupportedFormatError(FormatError):
    category = "unsupported-format"


class TruncationError(FormatError):
    category = "truncated"


class EmptyInputError(ChunkCNNError, ValueError):
    category = "empty-input"


class ShapeError(ChunkCNNError, ValueError):
    category = "shape"


class ArchitectureError(ChunkCNNError, ValueError):
    category = "architecture"


class LabelError(ChunkCNNError, ValueError):
    category = "label"


class DivergenceError(ChunkCNNError, RuntimeError):
    category = "divergence"


class ModelFileError(FormatError):
    category = "model-format"


class ModelVersionError(ModelFileError):
    category = "model-version"


class ModelChecksumError(ModelFileError):
    category = "model-checksum"


class ModelTruncatedError(ModelFileError):
    category = "model-truncated"


class SegmentValidationError(ChunkCNNError, ValueError):
    category = "segments"


class ScoringError(ChunkCNNError, ValueError):
    category = "scoring"


class ConfigError(ChunkCNNError, ValueError):
    category = "config"


class TaskError(ChunkCNNError, ValueError):
    category = "task"
