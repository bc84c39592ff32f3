"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/usage/format problems
exit 1, numerical divergence exits 2.
"""


class DriftLearnError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DriftLearnError, ValueError):
    """Inconsistent shapes, channels, or parameter settings."""


class UsageError(DriftLearnError, ValueError):
    """An operation was called with arguments that violate its contract."""


class StateError(DriftLearnError, RuntimeError):
    """An operation was called on an object in the wrong state."""


class GenerationError(DriftLearnError, RuntimeError):
    """Stream synthesis failed; carries the offending frame index."""

    def __init__(self, message, frame_index=None):
        super().__init__(message)
        self.frame_index = frame_index


class StreamFormatError(DriftLearnError, IOError):
    """A stream directory, manifest, or data file is missing or malformed."""


class DivergenceError(DriftLearnError, ArithmeticError):
    """Online training produced a non-finite loss.

    Carries the frame step and epoch where divergence was detected, and
    optionally the partial run report accumulated so far.
    """

    def __init__(self, message, step=None, epoch=None, partial_report=None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch
        self.partial_report = partial_report
