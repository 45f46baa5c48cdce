"""Exception hierarchy; the CLI maps these onto exit codes."""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigParseError(PipelineError):
    """Config file could not be parsed; message carries line information."""


class ConfigValidationError(PipelineError):
    """A config value violates an invariant; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DataError(PipelineError):
    """Dataset, mask or artifact contents are unusable."""


class DetectorTransportError(PipelineError):
    """Transient detection-client failure; callers may retry."""
