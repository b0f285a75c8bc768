"""
Exception hierarchy shared by every stage, with CLI exit codes.
"""

from contextlib import contextmanager
from typing import Iterator, Optional

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_INPUT = 4
EXIT_DIVERGED = 5
EXIT_PARSE = 6
EXIT_CHECKPOINT = 7


class DtsError(Exception):
    """Base class for all dtskit failures."""

    exit_code = EXIT_FAILURE

    def __init__(self, message: str, stage: Optional[str] = None) -> None:
        super().__init__(message)
        self.message = message
        self.stage = stage

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message


class DimensionError(DtsError, ValueError):
    """Operand shapes do not compose."""


class LabelError(DtsError, ValueError):
    """Class label outside [0, C)."""


class ArgumentError(DtsError, ValueError):
    """Invalid argument such as an empty batch."""


class ConfigurationError(DtsError):
    """Invalid configuration value or combination."""

    exit_code = EXIT_CONFIG


class StepIndexError(DtsError, IndexError):
    """Diffusion step outside 1..T."""


class PlanError(DtsError):
    """Sampler time grid cannot be built."""

    exit_code = EXIT_CONFIG


class EstimatorError(DtsError, ValueError):
    """Too few samples for a statistical estimator."""


class TrainingDivergedError(DtsError):
    """Non-finite loss or gradient during training."""

    exit_code = EXIT_DIVERGED

    def __init__(self, message: str, step: int, stage: Optional[str] = None) -> None:
        super().__init__(f"{message} at step {step}", stage)
        self.step = step


class SamplingDivergedError(DtsError):
    """Non-finite state while running a sampler."""

    exit_code = EXIT_DIVERGED

    def __init__(self, message: str, step: int, stage: Optional[str] = None) -> None:
        super().__init__(f"{message} at step {step}", stage)
        self.step = step


class DatasetParseError(DtsError):
    """Malformed dataset file."""

    exit_code = EXIT_PARSE

    def __init__(self, message: str, line: int, stage: Optional[str] = None) -> None:
        super().__init__(f"line {line}: {message}", stage)
        self.line = line


class CheckpointError(DtsError):
    """Checkpoint cannot be read or does not match the expected model."""

    exit_code = EXIT_CHECKPOINT


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class MissingInputError(DtsError):
    """A required input file does not exist."""

    exit_code = EXIT_MISSING_INPUT


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Tag any DtsError raised inside the block with the stage name."""
    try:
        yield
    except DtsError as exc:
        if exc.stage is None:
            exc.stage = name
        raise
