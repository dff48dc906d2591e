"""Exception hierarchy shared by every subsystem."""


class VSenseError(Exception):
    """Base class for all package errors."""


class DimensionError(VSenseError, ValueError):
    """An array has the wrong shape along a named axis."""


class ParameterError(VSenseError, ValueError):
    """A scalar argument is outside its admissible range."""


class FormatError(VSenseError):
    """A binary file is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompatibilityError(VSenseError):
    """Artifacts that must agree (fingerprints, config hashes) do not."""


class LabelingError(VSenseError):
    """A pressure series falls in the gap between the stable and unstable bands."""


class InvariantViolation(VSenseError):
    """A runtime contract (e.g. a frozen component) was broken."""


class NonFiniteError(InvariantViolation, ValueError):
    """NaN or Inf reached a layer boundary."""


class SequencingError(VSenseError):
    """A multi-step procedure was run out of order."""


class DependencyError(VSenseError):
    """A prerequisite artifact is missing."""


class AggregationError(VSenseError):
    """Per-seed reports cannot be combined."""


class ConfigError(VSenseError):
    """A run configuration is invalid."""
