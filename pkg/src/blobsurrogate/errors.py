"""Exception types shared across the toolkit.

Domain errors derive from :class:`BlobSurrogateError` so callers (and the
CLI) can distinguish them from programming errors and usage errors.
"""

from __future__ import annotations


class BlobSurrogateError(Exception):
    """Base class for all domain errors raised by this package."""


class GeometryError(BlobSurrogateError, ValueError):
    """Invalid volume geometry: bad dims, non-positive spacing, rank mismatch."""


class KernelTooLargeError(GeometryError):
    """A filter kernel radius reaches or exceeds the volume extent on some axis."""


class FormatError(BlobSurrogateError, ValueError):
    """A serialized artifact (volume, weights, CSV, JSON) is malformed."""


class ConfigError(BlobSurrogateError, ValueError):
    """A configuration value is out of its documented domain."""


class CapacityError(BlobSurrogateError, RuntimeError):
    """Rejection sampling could not place requested objects in the volume."""


class SamplingError(BlobSurrogateError, RuntimeError):
    """A batch sampler has no eligible items (e.g. no valid negatives)."""


class TrainingDivergedError(BlobSurrogateError, RuntimeError):
    """Loss became NaN or infinite during training.

    Carries the 0-based step index at which divergence was detected.
    """

    def __init__(self, step: int, message: str | None = None):
        self.step = int(step)
        super().__init__(message or f"training diverged at step {self.step}")


class UndefinedMetricError(BlobSurrogateError, ValueError):
    """A metric is undefined for the given inputs (e.g. sensitivity with no lesions)."""


class NumericsError(BlobSurrogateError, ArithmeticError):
    """Non-finite values detected where finite ones are required (debug checks)."""
