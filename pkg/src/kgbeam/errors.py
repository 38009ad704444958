"""Exception types shared across the engine."""

from __future__ import annotations


class KgbeamError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(KgbeamError):
    """An operation was invoked with arguments that break its contract."""


class KGParseError(KgbeamError):
    """A knowledge-graph source line could not be parsed."""

    def __init__(self, message: str, line_number: int | None = None, path: str | None = None):
        self.line_number = line_number
        self.path = path
        where = ""
        if path is not None:
            where += f" in {path}"
        if line_number is not None:
            where += f" at line {line_number}"
        super().__init__(message + where)


class TransportError(KgbeamError):
    """An HTTP request failed after exhausting its retry budget."""

    def __init__(self, message: str, attempts: int = 1, retryable: bool = True):
        self.attempts = attempts
        self.retryable = retryable
        super().__init__(f"{message} (attempts={attempts})")


class ApiError(KgbeamError):
    """The remote API returned a permanent (non-retryable) failure status."""

    def __init__(self, message: str, status: int, body_excerpt: str = ""):
        self.status = status
        self.body_excerpt = body_excerpt[:200]
        super().__init__(f"{message} (status={status}) {self.body_excerpt}".rstrip())


class OutputParseError(KgbeamError):
    """A model reply could not be parsed into scored candidates."""

    def __init__(self, message: str, raw_reply: str, categories: tuple[str, ...] = ()):
        self.raw_reply = raw_reply
        self.categories = tuple(categories)
        super().__init__(message)


class PrunerError(KgbeamError):
    """A pruning strategy failed and no fallback was allowed."""

    def __init__(self, message: str, raw_reply: str | None = None):
        self.raw_reply = raw_reply
        super().__init__(message)


class DatasetError(KgbeamError):
    """A dataset file did not match the expected schema."""

    def __init__(self, message: str, path: str | None = None, record_index: int | None = None):
        self.path = path
        self.record_index = record_index
        where = ""
        if path is not None:
            where += f" in {path}"
        if record_index is not None:
            where += f" at record {record_index}"
        super().__init__(message + where)


class EvaluationError(KgbeamError):
    """Evaluation inputs do not correspond (e.g. disjoint question ids)."""


class ConfigError(KgbeamError):
    """The run configuration is missing, contradictory, or unusable."""


class InitializationError(KgbeamError):
    """Traversal could not be initialized for a question."""
