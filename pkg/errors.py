"""
Exception hierarchy for the prompt-tuning lab.
"""
from typing import Optional


class LabError(Exception):
    """Base class for every error raised by the lab."""


class ShapeError(LabError):
    """Operand shapes do not conform to an operation's shape rule."""


class DomainError(LabError):
    """A value falls outside an operation's mathematical domain."""


class GraphError(LabError):
    """The computation graph cannot be differentiated as requested."""


class ConfigError(LabError):
    """Invalid configuration, sizes or arguments."""


class FormatError(LabError):
    """Malformed PTES container (magic, version, header or payload)."""


class PairingError(LabError):
    """Mixup pairing is impossible (same-class pair or one class present)."""


class IoError(LabError):
    """A report or artifact could not be written."""


class TrainingError(LabError):
    """Training diverged or failed at a given optimizer step."""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


# Errors that mean "the request was invalid", as opposed to a runtime failure
VALIDATION_ERRORS = (ConfigError, FormatError, ShapeError, PairingError)
