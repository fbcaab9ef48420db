"""Exception hierarchy.

Every domain error carries a short ``prefix`` that the CLI prints verbatim,
so scripts can match on stable message prefixes.
"""
from __future__ import annotations


class SilverStripError(Exception):
    """Base class for all domain errors raised by this package."""

    prefix = "error"

    def __str__(self) -> str:
        return f"{self.prefix}: {super().__str__()}"


class InvariantError(SilverStripError, ValueError):
    prefix = "invalid-data"


class GridMismatchError(SilverStripError, ValueError):
    prefix = "grid-mismatch"


class NiftiError(SilverStripError, ValueError):
    prefix = "nifti"


class DegenerateInputError(SilverStripError, ValueError):
    prefix = "degenerate-input"


class UndefinedMetricError(SilverStripError, ValueError):
    prefix = "undefined-metric"


class PredictorError(SilverStripError, RuntimeError):
    prefix = "predictor-failed"


class PredictorTimeoutError(PredictorError):
    prefix = "predictor-timeout"


class ProbabilityRangeError(PredictorError):
    prefix = "probability-range"


class PipelineStageError(SilverStripError, RuntimeError):
    """Wraps an error raised inside one skull-stripping stage."""

    prefix = "stage"

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
