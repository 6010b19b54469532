"""Exception hierarchy shared across the toolkit."""


class SpillkitError(Exception):
    """Base class for all toolkit errors."""


class InvalidGeometryError(SpillkitError):
    """Box coordinates are non-finite or inverted."""


class InvalidThresholdError(SpillkitError):
    """IoU threshold outside (0, 1]."""


class InvalidInputError(SpillkitError):
    """Structurally invalid input (unsorted thresholds, bad cursor, ...)."""


class EmptyInputError(SpillkitError):
    """An operation that requires a non-empty input got an empty one."""


class DegenerateBoxError(SpillkitError):
    """Zero-area bounding box where a positive area is required."""


class RangeError(SpillkitError):
    """Normalized value outside its legal range."""


class CocoParseError(SpillkitError):
    """Malformed COCO JSON; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class CocoValidationError(SpillkitError):
    """Dangling references or invariant violations; lists offending ids."""

    def __init__(self, message: str, ids: list | None = None):
        super().__init__(message)
        self.ids = ids or []


class SplitCountError(SpillkitError):
    """Requested split counts exceed the dataset size."""


class EmptyMaskError(SpillkitError):
    """Mask bbox does not intersect the target image."""


class ParameterBandError(SpillkitError):
    """A generation parameter falls outside its configured band."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class GeometryMismatchError(SpillkitError):
    """Mask / scene dimension mismatch or out-of-bounds placement."""


class UnknownClassError(SpillkitError):
    """class_id not present in the class registry."""


class UnsupportedShotCountError(SpillkitError):
    """ICL shot count outside the supported set and no override given."""


class TransportError(SpillkitError):
    """HTTP-level failure talking to a backend."""


class ContentFilterError(SpillkitError):
    """Backend rejected the request on content grounds; not retryable."""


class ContextOverflowError(SpillkitError):
    """Prompt too large for the backend context window."""


class TruncationError(SpillkitError):
    """Tensor container declares data past the end of the file."""


class CorruptionError(SpillkitError):
    """Tensor container header is internally inconsistent."""


class DimensionError(SpillkitError):
    """Matrix shapes do not agree for a merge."""


class UnknownTargetError(SpillkitError):
    """Adapter names a tensor absent from the base container."""


class CoverageError(SpillkitError):
    """Replay log is missing entries for requested images."""

    def __init__(self, message: str, ids: list | None = None):
        super().__init__(message)
        self.ids = ids or []


class InconsistencyError(SpillkitError):
    """Reports with mixed settings cannot share one table."""


class ComparisonError(SpillkitError):
    """Reports are not comparable (different dataset or threshold)."""


class StateError(SpillkitError):
    """Illegal scene-task state transition."""


class ValidationError(SpillkitError):
    """Request-level validation failure in a service handler."""


class ConfigBandError(SpillkitError):
    """Config value violates a module parameter band; carries field path."""

    def __init__(self, message: str, field_path: str):
        super().__init__(message)
        self.field_path = field_path
