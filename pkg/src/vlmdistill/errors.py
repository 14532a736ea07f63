"""Exception hierarchy shared across the package."""

from __future__ import annotations


class VlmDistillError(Exception):
    """Base class for every error raised by this package."""


class CalibrationError(VlmDistillError):
    pass


class InputError(VlmDistillError, ValueError):
    pass


class ConfigurationError(VlmDistillError, ValueError):
    pass


class AnnotationError(VlmDistillError):
    def __init__(self, message: str, sample_id: str | None = None):
        super().__init__(message if sample_id is None else f"{sample_id}: {message}")
        self.sample_id = sample_id


class TransportError(VlmDistillError):
    """A teacher request failed in transit and may be retried."""


class ParseError(VlmDistillError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class OutOfVocabularyError(ParseError):
    def __init__(self, phrase: str, family: str, raw: str = ""):
        super().__init__(f"{family} action {phrase!r} is not in the vocabulary", raw)
        self.phrase = phrase
        self.family = family


class StoreError(VlmDistillError):
    pass


class EncodingError(VlmDistillError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class StateError(VlmDistillError, RuntimeError):
    pass


class DegenerateInputError(VlmDistillError, ValueError):
    pass


class TrainingError(VlmDistillError):
    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step


class EmptyReportError(VlmDistillError):
    pass


class ValidationError(VlmDistillError, ValueError):
    pass
