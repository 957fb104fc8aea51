"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class GazeVQAError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(GazeVQAError):
    """A record or argument violates a declared invariant."""

    def __init__(self, message: str, sample_id: str | None = None, field: str | None = None):
        self.sample_id = sample_id
        self.field = field
        prefix = ""
        if sample_id is not None:
            prefix += f"sample {sample_id!r}: "
        if field is not None:
            prefix += f"field {field!r}: "
        super().__init__(prefix + message)


class ParseError(ValidationError):
    """A dataset line could not be decoded."""

    def __init__(self, message: str, line_number: int):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class ConfigurationError(ValidationError):
    """Inconsistent configuration (ratios, dimensions, regimes)."""


class FormatError(ValidationError):
    """A binary file does not follow its declared layout."""


class TrainingDivergence(GazeVQAError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")
