"""
Exceptions raised by ProbAdapt.

All errors derive from ProbAdaptError so the CLI can map them to exit codes:
- 1: configuration, usage and data errors
- 2: runtime failures during training or inference
"""

from typing import Optional


class ProbAdaptError(Exception):
    """Base class for all ProbAdapt errors."""

    exit_code: int = 2


class ConfigError(ProbAdaptError, ValueError):
    """Invalid configuration value, method name or combination."""

    exit_code = 1


class ShapeError(ProbAdaptError, ValueError):
    """Input with a shape the operation cannot accept."""

    exit_code = 1


class DataFormatError(ProbAdaptError, ValueError):
    """Malformed or missing dataset files."""

    exit_code = 1


class CheckpointMismatchError(ProbAdaptError, ValueError):
    """Checkpoint architecture does not match the expected model config."""

    exit_code = 1


class TrainingDivergedError(ProbAdaptError, RuntimeError):
    """Non-finite values appeared during training."""

    exit_code = 2

    def __init__(self, message: str, iteration: Optional[int] = None):
        self.message = message
        self.iteration = iteration
        super().__init__(str(self))

    def __str__(self) -> str:
        if self.iteration is None:
            return self.message
        return f"{self.message} (iteration {self.iteration})"
