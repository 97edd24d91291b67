"""Exception types shared across the package."""


class MoppError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(MoppError):
    """Invalid configuration value or combination."""


class DataError(MoppError):
    """Dataset is empty, malformed, or missing required structure."""


class FormatError(MoppError):
    """A serialized file failed to parse; the message names the byte offset."""


class TrainingDiverged(MoppError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at training step {step}")
