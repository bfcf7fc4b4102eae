"""Exception hierarchy shared across the package."""


class StructCknError(Exception):
    """Base class for all package errors."""


class DimensionError(StructCknError):
    """Shapes are incompatible (patch larger than map, channel mismatch, ...)."""


class ConfigurationError(StructCknError):
    """An invalid parameter combination (k > distinct patches, empty dataset, ...)."""


class ContractError(StructCknError):
    """Caller violated a documented precondition (label out of range, stale cache, ...)."""


class NumericError(StructCknError):
    """Numerical computation failed (non-finite values, non-concave line search, ...)."""


class TopologyError(StructCknError):
    """An operation requiring a specific graph topology received another one."""


class NoFeasibleLabelingError(StructCknError):
    """Every labeling of a factor graph is forbidden."""


class GenerationError(StructCknError):
    """The synthetic instance generator could not produce a feasible instance."""


class ParseError(StructCknError):
    """A data file is malformed; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(StructCknError):
    """A data file parsed but its internal links are inconsistent."""


class ModelingError(StructCknError):
    """The optimization model is malformed (no feasible pairing columns, ...)."""


class TrainingDivergedError(StructCknError):
    """The outer training loop diverged; carries recent objective values."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
