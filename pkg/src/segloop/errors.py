"""Shared exception types, kept in one place so the HTTP layer can map them to status codes."""


class SegloopError(Exception):
    """Base class for all package errors."""

    code = "error"


class ShapeMismatchError(SegloopError, ValueError):
    """A tensor/array argument has an incompatible dimension."""

    code = "shape_mismatch"


class EmptySupervisionError(SegloopError, ValueError):
    """A training call received inputs with no labeled pixels at all."""

    code = "empty_supervision"


class NonFiniteGradientError(SegloopError, FloatingPointError):
    """An optimizer update was rejected because a gradient contained NaN/Inf."""

    code = "non_finite_gradient"


class CheckpointStageError(SegloopError, ValueError):
    """Operation requires a checkpoint stage the given checkpoint does not have."""

    code = "checkpoint_stage"


class BusyError(SegloopError, RuntimeError):
    """A second training job was submitted while one is already active."""

    code = "busy"


class NotFoundError(SegloopError, KeyError):
    """A referenced project/tile/job/checkpoint does not exist."""

    code = "not_found"

    def __str__(self):  # KeyError quotes its message otherwise
        return self.args[0] if self.args else "not found"


class DuplicateError(SegloopError, ValueError):
    """Content identical to something already stored (same hash or name)."""

    code = "duplicate"


class CorruptStoreError(SegloopError, ValueError):
    """On-disk layout failed its magic/version/integrity check."""

    code = "corrupt_store"


class ProjectLockedError(SegloopError, RuntimeError):
    """Another writer holds the project's advisory lock."""

    code = "project_locked"


class DataError(SegloopError, ValueError):
    """Input data cannot be decoded or violates size limits."""

    code = "data_error"
